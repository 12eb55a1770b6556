//! Delay-based AIMD window with sub-packet pacing, and the RTT estimator.

use crate::types::SimTime;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AimdParams {
    pub initial: f64,
    pub floor: f64,
    pub max: f64,
    pub additive_step: f64,
    pub multiplicative_factor: f64,
}

impl Default for AimdParams {
    fn default() -> Self {
        AimdParams {
            initial: 8.0,
            floor: 1.0 / 64.0,
            max: 64.0,
            additive_step: 1.0,
            multiplicative_factor: 0.7,
        }
    }
}

/// Congestion window counted in requests; may fall below one.
#[derive(Debug, Clone, PartialEq)]
pub struct Aimd {
    params: AimdParams,
    cwnd: f64,
}

impl Aimd {
    pub fn new(params: AimdParams) -> Self {
        let cwnd = params.initial.clamp(params.floor, params.max);
        Aimd { params, cwnd }
    }

    pub fn cwnd(&self) -> f64 {
        self.cwnd
    }

    pub fn params(&self) -> AimdParams {
        self.params
    }

    /// Applies one RTT sample against the target delay.
    pub fn on_sample(&mut self, rtt: f64, target: f64) {
        if rtt <= target {
            self.cwnd += self.params.additive_step / self.cwnd;
        } else {
            self.cwnd *= self.params.multiplicative_factor;
        }
        self.clamp();
    }

    /// A timeout is treated as a congestion signal.
    pub fn on_timeout(&mut self) {
        self.cwnd *= self.params.multiplicative_factor;
        self.clamp();
    }

    fn clamp(&mut self) {
        self.cwnd = self.cwnd.clamp(self.params.floor, self.params.max);
    }

    /// Requests that may be outstanding at once.
    pub fn window(&self) -> usize {
        self.cwnd.ceil() as usize
    }

    /// Minimum gap between sends while the window is below one request.
    pub fn pacing_gap(&self, srtt: f64) -> Option<SimTime> {
        (self.cwnd < 1.0).then(|| (srtt / self.cwnd).ceil() as SimTime)
    }
}

/// Exponentially weighted moving average of RTT samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RttEstimator {
    alpha: f64,
    srtt: Option<f64>,
}

impl RttEstimator {
    pub fn new(alpha: f64) -> Self {
        RttEstimator { alpha, srtt: None }
    }

    pub fn sample(&mut self, rtt: f64) -> f64 {
        let s = match self.srtt {
            None => rtt,
            Some(prev) => prev + self.alpha * (rtt - prev),
        };
        self.srtt = Some(s);
        s
    }

    pub fn srtt(&self) -> Option<f64> {
        self.srtt
    }
}
