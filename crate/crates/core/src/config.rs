//! INI-style configuration: `key = value` lines under `[mn]`, `[net]`,
//! `[clib]` and `[cluster]`. Unset keys keep their defaults. Byte sizes
//! accept `K`, `M` and `G` suffixes (powers of two). `#` and `;` start
//! comments.

use thiserror::Error;

use crate::cluster::SimConfig;
use crate::types::PageSize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

fn size(v: &str) -> Option<u64> {
    let v = v.trim();
    let (num, mult) = match v.chars().last()?.to_ascii_uppercase() {
        'K' => (&v[..v.len() - 1], 1u64 << 10),
        'M' => (&v[..v.len() - 1], 1 << 20),
        'G' => (&v[..v.len() - 1], 1 << 30),
        _ => (v, 1),
    };
    num.trim().parse::<u64>().ok()?.checked_mul(mult)
}

fn float(v: &str) -> Option<f64> {
    v.parse::<f64>().ok().filter(|f| f.is_finite())
}

fn boolean(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

fn page(v: &str) -> Option<PageSize> {
    size(v).and_then(PageSize::from_bytes)
}

fn prob(v: &str) -> Option<f64> {
    float(v).filter(|p| (0.0..=1.0).contains(p))
}

fn positive(v: &str) -> Option<u64> {
    size(v).filter(|&n| n > 0)
}

pub fn parse(text: &str) -> Result<SimConfig, ConfigError> {
    let mut cfg = SimConfig::default();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split(['#', ';']).next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(line, "unterminated section header"))?
                .trim()
                .to_ascii_lowercase();
            if !["mn", "net", "clib", "cluster"].contains(&name.as_str()) {
                return Err(err(line, format!("unknown section [{name}]")));
            }
            section = Some(name);
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key = value, found {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let sect = section
            .as_deref()
            .ok_or_else(|| err(line, format!("key {key:?} outside any section")))?;
        let bad = || err(line, format!("invalid value {value:?} for {sect}.{key}"));
        macro_rules! set {
            ($field:expr, $conv:expr) => {
                $field = $conv(value).ok_or_else(bad)?
            };
        }
        let usize_ = |v: &str| size(v).map(|n| n as usize);
        let pos_usize = |v: &str| positive(v).map(|n| n as usize);
        let u32_ = |v: &str| size(v).and_then(|n| u32::try_from(n).ok());
        match (sect, key) {
            ("mn", "page_size") => set!(cfg.mn.page_size, page),
            ("mn", "physical_bytes") => set!(cfg.mn.physical_bytes, positive),
            ("mn", "slots_per_bucket") => set!(cfg.mn.slots_per_bucket, pos_usize),
            ("mn", "overprovision") => set!(cfg.mn.overprovision, positive),
            ("mn", "tlb_entries") => set!(cfg.mn.tlb_entries, usize_),
            ("mn", "free_buffer_pages") => set!(cfg.mn.free_buffer_pages, usize_),
            ("mn", "step_ns") => set!(cfg.mn.step_ns, size),
            ("mn", "stages") => set!(cfg.mn.stages, size),
            ("mn", "dram_ns") => set!(cfg.mn.dram_ns, size),
            ("mn", "bytes_per_ns") => set!(cfg.mn.bytes_per_ns, positive),
            ("mn", "meta_ns") => set!(cfg.mn.meta_ns, size),
            ("mn", "refill_ns") => set!(cfg.mn.refill_ns, size),
            ("mn", "dedup_bytes") => set!(cfg.mn.dedup_bytes, usize_),
            ("mn", "mtu") => set!(cfg.mn.mtu, pos_usize),
            ("mn", "max_request_bytes") => set!(cfg.mn.max_request_bytes, pos_usize),
            ("mn", "max_locks") => set!(cfg.mn.max_locks, usize_),
            ("mn", "max_lock_waiters") => set!(cfg.mn.max_lock_waiters, usize_),
            ("mn", "max_partial_writes") => set!(cfg.mn.max_partial_writes, usize_),
            ("net", "seed") => set!(cfg.net.seed, size),
            ("net", "loss") => set!(cfg.net.loss, prob),
            ("net", "dup") => set!(cfg.net.dup, prob),
            ("net", "corrupt") => set!(cfg.net.corrupt, prob),
            ("net", "jitter_ns") => set!(cfg.net.jitter, size),
            ("net", "base_delay_ns") => set!(cfg.net.base_delay, size),
            ("net", "bandwidth_gbps") => {
                let g = float(value).filter(|g| *g > 0.0).ok_or_else(bad)?;
                cfg.net.bandwidth_bps = (g * 1e9) as u64;
            }
            ("clib", "timeout_ms") => {
                let ms = float(value).filter(|m| *m > 0.0).ok_or_else(bad)?;
                cfg.clib.timeout_ns = (ms * 1e6) as u64;
            }
            ("clib", "max_retries") => set!(cfg.clib.max_retries, u32_),
            ("clib", "cwnd_init") => set!(cfg.clib.cwnd_init, float),
            ("clib", "cwnd_floor") => set!(cfg.clib.cwnd_floor, |v| float(v).filter(|f| *f > 0.0)),
            ("clib", "cwnd_max") => set!(cfg.clib.cwnd_max, float),
            ("clib", "additive_step") => set!(cfg.clib.additive_step, float),
            ("clib", "multiplicative_factor") => {
                set!(cfg.clib.multiplicative_factor, |v| float(v)
                    .filter(|f| *f > 0.0 && *f < 1.0))
            }
            ("clib", "target_delay_factor") => set!(cfg.clib.target_delay_factor, |v| float(v)
                .filter(|f| *f > 0.0)),
            ("clib", "rtt_alpha") => set!(cfg.clib.rtt_alpha, |v| float(v)
                .filter(|f| *f > 0.0 && *f <= 1.0)),
            ("clib", "iwnd_bytes") => set!(cfg.clib.iwnd_bytes, positive),
            ("clib", "mtu") => set!(cfg.clib.mtu, pos_usize),
            ("clib", "max_request_bytes") => set!(cfg.clib.max_request_bytes, pos_usize),
            ("clib", "page_size") => set!(cfg.clib.page_size, page),
            ("cluster", "memory_nodes") => set!(cfg.cluster.memory_nodes, pos_usize),
            ("cluster", "compute_nodes") => set!(cfg.cluster.compute_nodes, usize_),
            ("cluster", "pressure_threshold") => {
                set!(cfg.cluster.controller.pressure_threshold, prob)
            }
            ("cluster", "hard_capacity") => set!(cfg.cluster.controller.hard_capacity, prob),
            ("cluster", "auto_migrate") => set!(cfg.cluster.controller.auto_migrate, boolean),
            ("cluster", "services") => set!(cfg.cluster.services, boolean),
            _ => return Err(err(line, format!("unknown key {key:?} in [{sect}]"))),
        }
    }
    if cfg.clib.cwnd_floor > cfg.clib.cwnd_max {
        return Err(err(0, "cwnd_floor exceeds cwnd_max"));
    }
    if cfg.mn.physical_bytes % cfg.mn.page_size.bytes() != 0 {
        return Err(err(0, "physical_bytes is not a multiple of page_size"));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse("").unwrap(), SimConfig::default());
        assert_eq!(parse("# only a comment\n\n").unwrap(), SimConfig::default());
    }

    #[test]
    fn values_land_in_their_fields() {
        let cfg = parse(
            "[mn]\npage_size = 4K\nphysical_bytes = 64M ; small\n\
             [net]\nloss = 0.01\nbandwidth_gbps = 100\n\
             [clib]\ntimeout_ms = 2.5\niwnd_bytes = 128K\n\
             [cluster]\nmemory_nodes = 3\nauto_migrate = off\n",
        )
        .unwrap();
        assert_eq!(cfg.mn.page_size, PageSize::Size4K);
        assert_eq!(cfg.mn.physical_bytes, 64 << 20);
        assert_eq!(cfg.net.loss, 0.01);
        assert_eq!(cfg.net.bandwidth_bps, 100_000_000_000);
        assert_eq!(cfg.clib.timeout_ns, 2_500_000);
        assert_eq!(cfg.clib.iwnd_bytes, 128 << 10);
        assert_eq!(cfg.cluster.memory_nodes, 3);
        assert!(!cfg.cluster.controller.auto_migrate);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse("[mn]\n\npage_size = 3K\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.to_string().starts_with("line 3:"));
        assert_eq!(parse("[bogus]\n").unwrap_err().line, 1);
        assert_eq!(parse("[net]\nloss = 1.5\n").unwrap_err().line, 2);
        assert_eq!(parse("[net]\nfrob = 1\n").unwrap_err().line, 2);
        assert_eq!(parse("seed = 1\n").unwrap_err().line, 1);
        assert_eq!(parse("[net]\nseed\n").unwrap_err().line, 2);
        assert_eq!(parse("[net\n").unwrap_err().line, 1);
    }

    #[test]
    fn size_suffixes() {
        assert_eq!(size("30K"), Some(30 << 10));
        assert_eq!(size("1g"), Some(1 << 30));
        assert_eq!(size("12"), Some(12));
        assert_eq!(size("x"), None);
        assert_eq!(size("-1"), None);
    }
}
