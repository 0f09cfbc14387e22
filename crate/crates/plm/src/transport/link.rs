use std::time::Duration;

/// Emulated link characteristics. One-way delay of a message of `n` bytes is
/// `rtt/2 + 8n / bandwidth`; emulation is applied at the sender and messages
/// on one link are serialized (no parallel transfer).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkProfile {
    pub rtt_ms: f64,
    /// `None` means unlimited.
    pub bandwidth_bps: Option<f64>,
}

impl LinkProfile {
    pub fn new(rtt_ms: f64, bandwidth_bps: Option<f64>) -> Self {
        assert!(rtt_ms >= 0.0);
        if let Some(b) = bandwidth_bps {
            assert!(b > 0.0);
        }
        LinkProfile {
            rtt_ms,
            bandwidth_bps,
        }
    }

    /// Localhost: no added latency, unlimited bandwidth.
    pub fn lan() -> Self {
        LinkProfile::new(0.0, None)
    }

    /// 10ms RTT, 1Gbps.
    pub fn wan_a() -> Self {
        LinkProfile::new(10.0, Some(1e9))
    }

    /// 20ms RTT, 100Mbps.
    pub fn wan_b() -> Self {
        LinkProfile::new(20.0, Some(100e6))
    }

    pub fn is_lan(&self) -> bool {
        self.rtt_ms == 0.0 && self.bandwidth_bps.is_none()
    }

    /// Analytic one-way delay for a message of `bytes` bytes.
    pub fn one_way_delay(&self, bytes: usize) -> Duration {
        let latency_s = self.rtt_ms / 2.0 / 1e3;
        let transfer_s = match self.bandwidth_bps {
            Some(bw) => bytes as f64 * 8.0 / bw,
            None => 0.0,
        };
        Duration::from_secs_f64(latency_s + transfer_s)
    }
}
