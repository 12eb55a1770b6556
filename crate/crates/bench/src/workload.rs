//! Workload descriptions, YCSB-style traces and key distributions.
//!
//! A workload file holds `key = value` lines:
//!
//! ```text
//! kind = ycsb          # read | write | alloc | fault | ycsb | trace | mv | chase
//! mix = a              # ycsb only: a (50/50), b (95/5), c (read only)
//! trace = ops.trace    # trace only, relative to the workload file
//! clients = 4
//! ops = 10000
//! keys = 1000
//! distribution = zipf:0.99
//! value_size = 100
//! arrival = closed     # or open:<mean gap in ns>
//! seed = 1
//! ```

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Trace {
        path: String,
        #[source]
        source: Box<WorkloadError>,
    },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

fn parse_err(line: usize, message: impl Into<String>) -> WorkloadError {
    WorkloadError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Micro {
    Read,
    Write,
    Alloc,
    Fault,
}

/// Read share of a YCSB core workload; the rest are updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YcsbMix {
    A,
    B,
    C,
}

impl YcsbMix {
    pub fn read_fraction(self) -> f64 {
        match self {
            YcsbMix::A => 0.5,
            YcsbMix::B => 0.95,
            YcsbMix::C => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Kind {
    Micro(Micro),
    Ycsb(YcsbMix),
    Trace(Vec<TraceOp>),
    Mv,
    Chase,
}

impl Kind {
    pub fn name(&self) -> &'static str {
        match self {
            Kind::Micro(Micro::Read) => "read",
            Kind::Micro(Micro::Write) => "write",
            Kind::Micro(Micro::Alloc) => "alloc",
            Kind::Micro(Micro::Fault) => "fault",
            Kind::Ycsb(_) => "ycsb",
            Kind::Trace(_) => "trace",
            Kind::Mv => "mv",
            Kind::Chase => "chase",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyDist {
    Uniform,
    Zipf(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arrival {
    /// Each client keeps one operation outstanding.
    Closed,
    /// Poisson arrivals over all clients with this mean gap in ns.
    Open(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub kind: Kind,
    pub clients: usize,
    pub ops: u64,
    pub keys: u64,
    pub dist: KeyDist,
    pub value_size: u32,
    pub arrival: Arrival,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: Kind::Micro(Micro::Read),
            clients: 1,
            ops: 1000,
            keys: 1000,
            dist: KeyDist::Uniform,
            value_size: 64,
            arrival: Arrival::Closed,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn ycsb(mix: YcsbMix, clients: usize, ops: u64, keys: u64) -> Self {
        WorkloadSpec {
            kind: Kind::Ycsb(mix),
            clients,
            ops,
            keys,
            dist: KeyDist::Zipf(0.99),
            value_size: 100,
            ..Default::default()
        }
    }
}

/// Parses a workload file. `base` resolves a relative `trace` path.
pub fn parse_workload(text: &str, base: &Path) -> Result<WorkloadSpec, WorkloadError> {
    let mut spec = WorkloadSpec::default();
    let mut kind: Option<(usize, String)> = None;
    let mut mix = YcsbMix::A;
    let mut trace: Option<(usize, String)> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected key = value, found {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = || parse_err(line, format!("invalid value {value:?} for {key}"));
        let int = || value.parse::<u64>().map_err(|_| bad());
        match key {
            "kind" => kind = Some((line, value.to_ascii_lowercase())),
            "mix" => {
                mix = match value.to_ascii_lowercase().as_str() {
                    "a" => YcsbMix::A,
                    "b" => YcsbMix::B,
                    "c" => YcsbMix::C,
                    _ => return Err(bad()),
                }
            }
            "trace" => trace = Some((line, value.to_string())),
            "clients" => {
                spec.clients =
                    int().and_then(|n| if n == 0 { Err(bad()) } else { Ok(n as usize) })?
            }
            "ops" => spec.ops = int()?,
            "keys" => spec.keys = int().and_then(|n| if n == 0 { Err(bad()) } else { Ok(n) })?,
            "value_size" => {
                spec.value_size = int().and_then(|n| u32::try_from(n).map_err(|_| bad()))?
            }
            "seed" => spec.seed = int()?,
            "distribution" => {
                spec.dist = match value.split_once(':') {
                    None if value.eq_ignore_ascii_case("uniform") => KeyDist::Uniform,
                    Some((z, t)) if z.trim().eq_ignore_ascii_case("zipf") => {
                        let t: f64 = t.trim().parse().map_err(|_| bad())?;
                        if !(t > 0.0 && t.is_finite()) {
                            return Err(bad());
                        }
                        KeyDist::Zipf(t)
                    }
                    _ => return Err(bad()),
                }
            }
            "arrival" => {
                spec.arrival = match value.split_once(':') {
                    None if value.eq_ignore_ascii_case("closed") => Arrival::Closed,
                    Some((o, g)) if o.trim().eq_ignore_ascii_case("open") => {
                        let g: f64 = g.trim().parse().map_err(|_| bad())?;
                        if !(g > 0.0 && g.is_finite()) {
                            return Err(bad());
                        }
                        Arrival::Open(g)
                    }
                    _ => return Err(bad()),
                }
            }
            _ => return Err(parse_err(line, format!("unknown key {key:?}"))),
        }
    }
    let (kline, kname) = kind.unwrap_or((0, "read".into()));
    spec.kind = match kname.as_str() {
        "read" => Kind::Micro(Micro::Read),
        "write" => Kind::Micro(Micro::Write),
        "alloc" => Kind::Micro(Micro::Alloc),
        "fault" => Kind::Micro(Micro::Fault),
        "ycsb" => Kind::Ycsb(mix),
        "mv" => Kind::Mv,
        "chase" => Kind::Chase,
        "trace" => {
            let (_, path) =
                trace.ok_or_else(|| parse_err(kline, "kind = trace needs a trace path"))?;
            let path = base.join(path);
            let shown = path.display().to_string();
            let text = std::fs::read_to_string(&path).map_err(|e| WorkloadError::Io {
                path: shown.clone(),
                message: e.to_string(),
            })?;
            let ops = ingest_trace(&text).map_err(|e| WorkloadError::Trace {
                path: shown,
                source: Box::new(e),
            })?;
            Kind::Trace(ops)
        }
        other => return Err(parse_err(kline, format!("unknown workload kind {other:?}"))),
    };
    if let Kind::Trace(ops) = &spec.kind {
        spec.ops = ops.len() as u64;
    }
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceVerb {
    Read,
    Update,
    Insert,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceOp {
    pub verb: TraceVerb,
    pub key: String,
    /// Value size for writes; `None` uses the workload's default.
    pub value_size: Option<u32>,
}

/// Parses `OP key [value-size]` lines. Blank lines and `#` comments are
/// skipped.
pub fn ingest_trace(text: &str) -> Result<Vec<TraceOp>, WorkloadError> {
    let mut ops = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut fields = content.split_whitespace();
        let verb = match fields.next().unwrap() {
            "READ" => TraceVerb::Read,
            "UPDATE" => TraceVerb::Update,
            "INSERT" => TraceVerb::Insert,
            "DELETE" => TraceVerb::Delete,
            other => return Err(parse_err(line, format!("unknown operation {other:?}"))),
        };
        let key = fields
            .next()
            .ok_or_else(|| parse_err(line, "missing key"))?
            .to_string();
        if key.len() > u16::MAX as usize {
            return Err(parse_err(line, "key too long"));
        }
        let value_size = match fields.next() {
            None => None,
            Some(v) => {
                if matches!(verb, TraceVerb::Read | TraceVerb::Delete) {
                    return Err(parse_err(line, "value size on a read or delete"));
                }
                Some(
                    v.parse::<u32>()
                        .map_err(|_| parse_err(line, format!("invalid value size {v:?}")))?,
                )
            }
        };
        if let Some(extra) = fields.next() {
            return Err(parse_err(line, format!("unexpected field {extra:?}")));
        }
        ops.push(TraceOp {
            verb,
            key,
            value_size,
        });
    }
    Ok(ops)
}

/// Draws key indices in `0..n`.
#[derive(Debug, Clone)]
pub enum KeyGen {
    Uniform(u64),
    /// Rank 0 is the most popular key.
    Zipf(Zipf<f64>),
}

impl KeyGen {
    pub fn new(dist: KeyDist, n: u64) -> Self {
        match dist {
            KeyDist::Uniform => KeyGen::Uniform(n.max(1)),
            KeyDist::Zipf(theta) => {
                KeyGen::Zipf(Zipf::new(n.max(1) as f64, theta).expect("theta > 0"))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            KeyGen::Uniform(n) => rng.random_range(0..*n),
            KeyGen::Zipf(z) => z.sample(rng) as u64 - 1,
        }
    }
}

/// Probability of the most popular key under Zipf(`theta`) over `n` keys.
pub fn zipf_top_mass(n: u64, theta: f64) -> f64 {
    let h: f64 = (1..=n).map(|k| (k as f64).powf(-theta)).sum();
    1.0 / h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trace_lines() {
        let ops =
            ingest_trace("READ user1\n\n# c\nUPDATE user1 1024\nINSERT k\nDELETE k\n").unwrap();
        assert_eq!(
            ops[0],
            TraceOp {
                verb: TraceVerb::Read,
                key: "user1".into(),
                value_size: None
            }
        );
        assert_eq!(ops[1].value_size, Some(1024));
        assert_eq!(ops.len(), 4);
    }

    #[test]
    fn trace_errors_name_the_line() {
        for (text, line) in [
            ("FROB x\n", 1),
            ("READ a\nREAD\n", 2),
            ("READ a\nUPDATE b x\n", 2),
            ("READ a 10\n", 1),
            ("UPDATE a 1 2\n", 1),
        ] {
            match ingest_trace(text) {
                Err(WorkloadError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn workload_fields() {
        let w = parse_workload(
            "kind = ycsb\nmix = b\nclients = 2\nops = 50\ndistribution = zipf:0.99\narrival = open:500\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(w.kind, Kind::Ycsb(YcsbMix::B));
        assert_eq!((w.clients, w.ops), (2, 50));
        assert_eq!(w.dist, KeyDist::Zipf(0.99));
        assert_eq!(w.arrival, Arrival::Open(500.0));
        assert!(matches!(
            parse_workload("ops = 1\nkind = nope\n", Path::new(".")),
            Err(WorkloadError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_workload("clients = 0\n", Path::new(".")),
            Err(WorkloadError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn zipf_top_key_matches_analytic_mass() {
        let n = 1000;
        let gen = KeyGen::new(KeyDist::Zipf(0.99), n);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = 100_000;
        let top = (0..samples).filter(|_| gen.sample(&mut rng) == 0).count();
        let freq = top as f64 / samples as f64;
        let mass = zipf_top_mass(n, 0.99);
        assert!(
            (freq - mass).abs() <= 0.02 * mass,
            "freq {freq} mass {mass}"
        );
    }

    #[test]
    fn uniform_stays_in_range() {
        let gen = KeyGen::new(KeyDist::Uniform, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| gen.sample(&mut rng) < 7));
    }
}
