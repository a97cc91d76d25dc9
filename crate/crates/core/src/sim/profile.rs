//! Capacities and latencies of the modeled off-path SmartNIC.

use serde::Serialize;

use crate::config::{parse_entries, ConfigError, Entry};

/// How per-packet Arm processing time is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessDist {
    Deterministic,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardwareProfile {
    /// Per NIC-switch endpoint, per direction.
    pub endpoint_rate_gbps: f64,
    /// Achievable mixed read/write bandwidth of the Arm DRAM.
    pub arm_mem_bw_gbps: f64,
    pub llc_capacity_bytes: u64,
    pub llc_associativity: u32,
    pub cacheline_bytes: u32,
    /// Whether device writes allocate into the LLC.
    pub ddio: bool,
    pub pcie_one_way_ns: u64,
    pub mmio_rate_per_s: f64,
    pub dma_setup_ns: u64,
    pub invalidate_call_ns: u64,
    /// One-way latency across the external fabric between two NICs.
    pub wire_one_way_ns: u64,
    pub arm_core_count: u32,
    pub data_core_count: u32,
    pub control_core_count: u32,
    /// Mean per-packet RX processing time on a data core.
    pub rx_process_ns: u64,
    pub process_dist: ProcessDist,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        Self::bf3()
    }
}

impl HardwareProfile {
    /// 400 Gbps duplex endpoints, 480 Gbps Arm memory, 16 MiB LLC.
    pub fn bf3() -> Self {
        HardwareProfile {
            endpoint_rate_gbps: 400.0,
            arm_mem_bw_gbps: 480.0,
            llc_capacity_bytes: 16 << 20,
            llc_associativity: 16,
            cacheline_bytes: 64,
            ddio: true,
            pcie_one_way_ns: 300,
            mmio_rate_per_s: 1000.0,
            dma_setup_ns: 200,
            invalidate_call_ns: 100,
            wire_one_way_ns: 1500,
            arm_core_count: 16,
            data_core_count: 12,
            control_core_count: 2,
            rx_process_ns: 1000,
            process_dist: ProcessDist::Deterministic,
        }
    }

    /// Cores left over for the offload engine.
    pub fn engine_core_count(&self) -> u32 {
        self.arm_core_count - self.data_core_count - self.control_core_count
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("endpoint_rate_gbps", self.endpoint_rate_gbps),
            ("arm_mem_bw_gbps", self.arm_mem_bw_gbps),
            ("mmio_rate_per_s", self.mmio_rate_per_s),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be > 0")));
            }
        }
        let counts = [
            ("llc_capacity_bytes", self.llc_capacity_bytes),
            ("llc_associativity", self.llc_associativity as u64),
            ("cacheline_bytes", self.cacheline_bytes as u64),
            ("pcie_one_way_ns", self.pcie_one_way_ns),
            ("dma_setup_ns", self.dma_setup_ns),
            ("invalidate_call_ns", self.invalidate_call_ns),
            ("arm_core_count", self.arm_core_count as u64),
            ("data_core_count", self.data_core_count as u64),
            ("control_core_count", self.control_core_count as u64),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be > 0")));
            }
        }
        if !self.cacheline_bytes.is_power_of_two() {
            return Err(ConfigError::Invalid(
                "cacheline_bytes must be a power of two".into(),
            ));
        }
        if self.data_core_count + self.control_core_count > self.arm_core_count {
            return Err(ConfigError::Invalid(
                "data_core_count + control_core_count exceeds arm_core_count".into(),
            ));
        }
        let way_bytes = self.cacheline_bytes as u64 * self.llc_associativity as u64;
        if self.llc_capacity_bytes % way_bytes != 0 {
            return Err(ConfigError::Invalid(
                "llc_capacity_bytes must be divisible by cacheline_bytes * llc_associativity"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Parses `key = value` overrides on top of the default profile.
    /// Keys in any section are accepted; a `[profile]` section is conventional.
    pub fn from_config(text: &str) -> Result<Self, ConfigError> {
        let mut p = Self::bf3();
        p.apply_config(text)?;
        Ok(p)
    }

    /// Applies `key = value` overrides to this profile and revalidates.
    pub fn apply_config(&mut self, text: &str) -> Result<(), ConfigError> {
        self.apply_entries(&parse_entries(text)?)
    }

    pub fn apply_entries(&mut self, entries: &[Entry]) -> Result<(), ConfigError> {
        let p = self;
        for e in entries {
            match e.key.as_str() {
                "endpoint_rate_gbps" => p.endpoint_rate_gbps = e.parse()?,
                "arm_mem_bw_gbps" => p.arm_mem_bw_gbps = e.parse()?,
                "llc_capacity_bytes" => p.llc_capacity_bytes = e.parse()?,
                "llc_associativity" => p.llc_associativity = e.parse()?,
                "cacheline_bytes" => p.cacheline_bytes = e.parse()?,
                "ddio" => p.ddio = e.parse_bool()?,
                "pcie_one_way_ns" => p.pcie_one_way_ns = e.parse()?,
                "mmio_rate_per_s" => p.mmio_rate_per_s = e.parse()?,
                "dma_setup_ns" => p.dma_setup_ns = e.parse()?,
                "invalidate_call_ns" => p.invalidate_call_ns = e.parse()?,
                "wire_one_way_ns" => p.wire_one_way_ns = e.parse()?,
                "arm_core_count" => p.arm_core_count = e.parse()?,
                "data_core_count" => p.data_core_count = e.parse()?,
                "control_core_count" => p.control_core_count = e.parse()?,
                "rx_process_ns" => p.rx_process_ns = e.parse()?,
                "process_dist" => {
                    p.process_dist = match e.value.as_str() {
                        "deterministic" => ProcessDist::Deterministic,
                        "exponential" => ProcessDist::Exponential,
                        _ => return Err(e.value_error("expected deterministic|exponential")),
                    }
                }
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line: e.line,
                        key: e.key.clone(),
                    })
                }
            }
        }
        p.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let p = HardwareProfile::bf3();
        p.validate().unwrap();
        assert_eq!(p.llc_capacity_bytes, 16 * 1024 * 1024);
        assert_eq!(p.engine_core_count(), 2);
    }

    #[test]
    fn overrides_and_validation() {
        let p = HardwareProfile::from_config("[profile]\nendpoint_rate_gbps = 800\nddio = false\n")
            .unwrap();
        assert_eq!(p.endpoint_rate_gbps, 800.0);
        assert!(!p.ddio);
        assert!(matches!(
            HardwareProfile::from_config("cacheline_bytes = 48"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            HardwareProfile::from_config("data_core_count = 15"),
            Err(ConfigError::Invalid(_))
        ));
        assert_eq!(
            HardwareProfile::from_config("\nbogus = 1"),
            Err(ConfigError::UnknownKey {
                line: 2,
                key: "bogus".into()
            })
        );
    }
}
