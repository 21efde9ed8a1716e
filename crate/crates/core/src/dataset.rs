//! Random-search corpus generation, oracle labeling, persistence and splits.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::circuit::{ComponentPool, DeviceKind, Topology, NUM_PORTS};
use crate::encoding::{encode_topology, parse_topology, EncodingMode};
use crate::sim::{oracle, SimConfig, DUTY_CYCLES};

/// Current `.csd` format version.
pub const FORMAT_VERSION: u32 = 1;
const HEADER_TAG: &str = "#csd";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: u64,
    pub pool: ComponentPool,
    pub duty: f64,
    /// Array-mode netlist text.
    pub netlist_array: String,
    pub valid: bool,
    /// `NaN` for invalid records.
    pub efficiency: f64,
    pub v_out_avg: f64,
}

impl DatasetRecord {
    pub fn topology(&self) -> Result<Topology, crate::encoding::ParseError> {
        parse_topology(&self.netlist_array, &self.pool, EncodingMode::Array)
    }

    /// Field-wise equality that treats `NaN == NaN`.
    pub fn same_as(&self, other: &Self) -> bool {
        let feq = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        self.id == other.id
            && self.pool == other.pool
            && feq(self.duty, other.duty)
            && self.netlist_array == other.netlist_array
            && self.valid == other.valid
            && feq(self.efficiency, other.efficiency)
            && feq(self.v_out_avg, other.v_out_avg)
    }
}

/// Weight of opening a new net in the partition sampler.
pub const NEW_NET_WEIGHT: f64 = 1.5;

/// Random partition of the 13 ports: ports are visited in random order and
/// each joins an existing net with probability proportional to its size, or
/// opens a new net with weight [`NEW_NET_WEIGHT`].
pub fn random_topology<R: Rng + ?Sized>(pool: ComponentPool, rng: &mut R) -> Topology {
    let mut order: [usize; NUM_PORTS] = std::array::from_fn(|i| i);
    order.shuffle(rng);
    let mut labels = [0usize; NUM_PORTS];
    let mut sizes: Vec<usize> = Vec::new();
    for (visited, &port) in order.iter().enumerate() {
        let total = visited as f64 + NEW_NET_WEIGHT;
        let mut u = rng.gen::<f64>() * total;
        let mut choice = sizes.len();
        for (net, &size) in sizes.iter().enumerate() {
            if u < size as f64 {
                choice = net;
                break;
            }
            u -= size as f64;
        }
        if choice == sizes.len() {
            sizes.push(0);
        }
        sizes[choice] += 1;
        labels[port] = choice;
    }
    Topology::from_labels(pool, &labels)
}

/// Pool with each slot uniform over the four kinds.
pub fn random_pool<R: Rng + ?Sized>(rng: &mut R) -> ComponentPool {
    ComponentPool::new(std::array::from_fn(|_| {
        DeviceKind::ALL[rng.gen_range(0..DeviceKind::ALL.len())]
    }))
}

pub fn random_duty<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    DUTY_CYCLES[rng.gen_range(0..DUTY_CYCLES.len())]
}

/// Deterministic 64-bit mix of two words (splitmix64 finalizer).
pub fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent rng stream for item `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed, index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    /// Drop records whose `(canonical key, duty)` was already emitted.
    pub dedup: bool,
    /// Label screen-disconnected topologies invalid without simulating.
    pub screen: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            dedup: false,
            screen: true,
        }
    }
}

/// Summary counters of a generation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationStats {
    pub attempts: u64,
    pub duplicates: u64,
    pub screened_out: u64,
    pub valid: u64,
}

fn candidate(
    seed: u64,
    attempt: u64,
    sim: &SimConfig,
    screen: bool,
) -> (DatasetRecord, Topology, bool) {
    let mut rng = stream_rng(seed, attempt);
    let pool = random_pool(&mut rng);
    let duty = random_duty(&mut rng);
    let topology = random_topology(pool, &mut rng);
    let screened = screen && !topology.structural_screen().connected;
    let (valid, efficiency, v_out_avg) = if screened {
        (false, f64::NAN, 0.0)
    } else {
        let v = oracle(&topology, duty, sim);
        (v.valid, v.efficiency.unwrap_or(f64::NAN), v.v_out_avg)
    };
    let record = DatasetRecord {
        id: 0,
        pool,
        duty,
        netlist_array: encode_topology(&topology, EncodingMode::Array),
        valid,
        efficiency,
        v_out_avg,
    };
    (record, topology, screened)
}

/// Generates `n` labeled records. Each attempt draws from its own rng stream,
/// so the output depends only on `(n, sim, opts)`.
pub fn generate_dataset(
    n: usize,
    sim: &SimConfig,
    opts: &GenerateOptions,
) -> (Vec<DatasetRecord>, GenerationStats) {
    const CHUNK: u64 = 256;
    let mut out = Vec::with_capacity(n);
    let mut stats = GenerationStats::default();
    let mut seen = HashSet::new();
    let mut next_attempt = 0u64;
    while out.len() < n {
        let batch: Vec<_> = (next_attempt..next_attempt + CHUNK)
            .into_par_iter()
            .map(|a| candidate(opts.seed, a, sim, opts.screen))
            .collect();
        next_attempt += CHUNK;
        for (mut record, topology, screened) in batch {
            if out.len() == n {
                break;
            }
            stats.attempts += 1;
            if opts.dedup && !seen.insert((topology.canonicalize(), record.duty.to_bits())) {
                stats.duplicates += 1;
                continue;
            }
            stats.screened_out += screened as u64;
            stats.valid += record.valid as u64;
            record.id = out.len() as u64;
            out.push(record);
        }
    }
    (out, stats)
}

fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.16e}")
    }
}

fn parse_float(s: &str, line: usize, field: &str) -> Result<f64, DatasetError> {
    if s == "nan" {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| DatasetError::Format {
        line,
        message: format!("bad {field} `{s}`"),
    })
}

pub fn format_record(r: &DatasetRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.id,
        r.pool,
        fmt_float(r.duty),
        r.netlist_array,
        r.valid as u8,
        fmt_float(r.efficiency),
        fmt_float(r.v_out_avg)
    )
}

pub fn parse_record(line: &str, lineno: usize) -> Result<DatasetRecord, DatasetError> {
    let fields: Vec<&str> = line.split('\t').collect();
    let err = |message: String| DatasetError::Format {
        line: lineno,
        message,
    };
    if fields.len() != 7 {
        return Err(err(format!("expected 7 fields, found {}", fields.len())));
    }
    let id = fields[0]
        .parse()
        .map_err(|_| err(format!("bad id `{}`", fields[0])))?;
    let pool: ComponentPool = fields[1].parse().map_err(|e| err(format!("{e}")))?;
    let duty = parse_float(fields[2], lineno, "duty")?;
    let netlist_array = fields[3].to_string();
    parse_topology(&netlist_array, &pool, EncodingMode::Array)
        .map_err(|e| err(format!("netlist: {e}")))?;
    let valid = match fields[4] {
        "0" => false,
        "1" => true,
        other => return Err(err(format!("bad validity flag `{other}`"))),
    };
    let efficiency = parse_float(fields[5], lineno, "efficiency")?;
    if valid && !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(err(format!("valid record with efficiency {efficiency}")));
    }
    Ok(DatasetRecord {
        id,
        pool,
        duty,
        netlist_array,
        valid,
        efficiency,
        v_out_avg: parse_float(fields[6], lineno, "v_out_avg")?,
    })
}

pub fn write_records_to<W: Write>(mut w: W, records: &[DatasetRecord]) -> io::Result<()> {
    writeln!(w, "{HEADER_TAG}\t{FORMAT_VERSION}")?;
    for r in records {
        writeln!(w, "{}", format_record(r))?;
    }
    w.flush()
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    write_records_to(BufWriter::new(File::create(path)?), records)?;
    Ok(())
}

pub fn read_records_from<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if let Some(rest) = line.strip_prefix(HEADER_TAG) {
                let found: u32 = rest.trim().parse().map_err(|_| DatasetError::Format {
                    line: 1,
                    message: format!("bad header `{line}`"),
                })?;
                if found > FORMAT_VERSION {
                    return Err(DatasetError::Version {
                        found,
                        supported: FORMAT_VERSION,
                    });
                }
                continue;
            }
            return Err(DatasetError::Format {
                line: 1,
                message: "missing `#csd` header".into(),
            });
        }
        if line.is_empty() {
            continue;
        }
        out.push(parse_record(&line, lineno)?);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    read_records_from(BufReader::new(File::open(path)?))
}

/// Train/validation/test fractions plus the hashing seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn is_valid(&self) -> bool {
        [self.train, self.val, self.test]
            .iter()
            .all(|f| (0.0..=1.0).contains(f))
            && ((self.train + self.val + self.test) - 1.0).abs() < 1e-9
    }

    /// Deterministic assignment of a record id.
    pub fn assign(&self, id: u64) -> SplitPart {
        let u = (mix64(self.seed, id) >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.train {
            SplitPart::Train
        } else if u < self.train + self.val {
            SplitPart::Val
        } else {
            SplitPart::Test
        }
    }
}

/// Splits records into `(train, val, test)`.
pub fn split(
    records: &[DatasetRecord],
    spec: &SplitSpec,
) -> (Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>) {
    assert!(
        spec.is_valid(),
        "split fractions must be in [0,1] and sum to 1"
    );
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for r in records {
        match spec.assign(r.id) {
            SplitPart::Train => train.push(r.clone()),
            SplitPart::Val => val.push(r.clone()),
            SplitPart::Test => test.push(r.clone()),
        }
    }
    (train, val, test)
}

/// Fraction of five-device topologies from the sampler that pass
/// the structural screen.
pub fn screen_connected_fraction(seed: u64, draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..draws {
        let pool = random_pool(&mut rng);
        if random_topology(pool, &mut rng)
            .structural_screen()
            .connected
        {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}
