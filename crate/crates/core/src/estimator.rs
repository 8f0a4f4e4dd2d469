//! Training-memory and compute accounting in exact integer bytes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::sparse_count;

pub const GIB: u128 = 1024 * 1024 * 1024;

pub fn to_gib(bytes: u128) -> f64 {
    bytes as f64 / GIB as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Full,
    LowRank,
    Lora,
    SlTrain,
    GaLore,
    Fira,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Full,
        Method::LowRank,
        Method::Lora,
        Method::SlTrain,
        Method::GaLore,
        Method::Fira,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::LowRank => "lowrank",
            Method::Lora => "lora",
            Method::SlTrain => "sltrain",
            Method::GaLore => "galore",
            Method::Fira => "fira",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['_', '-'], "");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

/// Bytes per stored gradient / optimizer value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradConvention {
    /// Per-matrix table: 4-byte gradients and moments.
    PerMatrix,
    /// End-to-end example: gradients and moments at 2 bytes, like weights.
    #[default]
    WorkedExample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatrixMemory {
    pub weight: u128,
    pub activation: u128,
    pub optimizer: u128,
    pub gradient: u128,
}

impl MatrixMemory {
    pub fn total(&self) -> u128 {
        self.weight + self.activation + self.optimizer + self.gradient
    }
}

/// Per-matrix bytes for an `m × n` weight (`m ≤ n` in the table's layout)
/// and input batch `b`, under the 4-byte gradient convention.
pub fn method_memory(
    method: Method,
    m: u128,
    n: u128,
    r: u128,
    delta: f64,
    b: u128,
) -> Result<MatrixMemory> {
    if m == 0 || n == 0 {
        return Err(invalid("matrix dimensions must be positive"));
    }
    if method != Method::Full && (r == 0 || r > m.min(n)) {
        return Err(Error::Rank {
            rank: r as usize,
            rows: m as usize,
            cols: n as usize,
        });
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(invalid(format!("sparsity ratio {delta} outside [0, 1]")));
    }
    let mn = m * n;
    let low = m * r + n * r;
    let dmn = sparse_count(m as usize, n as usize, delta) as u128;
    let activation = 2 * (m + n) * b;
    let (weight, optimizer, gradient) = match method {
        Method::Full => (2 * mn, 2 * 4 * mn, 4 * mn),
        Method::LowRank => (2 * low, 2 * 4 * low, 4 * low),
        Method::Lora => (2 * (mn + low), 2 * 4 * low, 4 * low),
        Method::SlTrain => (2 * (low + dmn), 2 * 4 * (low + dmn), 4 * (low + dmn)),
        Method::GaLore => (2 * mn, 4 * (m * r + 2 * n * r), 4 * mn),
        Method::Fira => (2 * mn, 4 * (m * r + 2 * n * r + 1), 4 * mn),
    };
    Ok(MatrixMemory {
        weight,
        activation,
        optimizer,
        gradient,
    })
}

/// As [`method_memory`], with gradient and optimizer bytes halved under the
/// worked-example convention.
pub fn method_memory_with(
    method: Method,
    m: u128,
    n: u128,
    r: u128,
    delta: f64,
    b: u128,
    convention: GradConvention,
) -> Result<MatrixMemory> {
    let mut mem = method_memory(method, m, n, r, delta, b)?;
    if convention == GradConvention::WorkedExample {
        mem.gradient /= 2;
        mem.optimizer /= 2;
    }
    Ok(mem)
}

/// Transformer shape for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub b: u128,
    pub s: u128,
    pub h: u128,
    pub l: u128,
    pub a: u128,
    pub k: u128,
    pub v: u128,
    pub n_params: u128,
    pub n_nonembed: u128,
}

impl ArchSpec {
    /// Batch 1, sequence 2048, 7·10⁹ parameters; the non-embedding count
    /// excludes the input and output embedding tables (`2vh`).
    pub fn llama_7b() -> Self {
        let (h, v) = (4096, 32000);
        let n_params = 7_000_000_000;
        Self {
            b: 1,
            s: 2048,
            h,
            l: 32,
            a: 32,
            k: 11008,
            v,
            n_params,
            n_nonembed: n_params - 2 * v * h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.b,
            self.s,
            self.h,
            self.l,
            self.a,
            self.k,
            self.v,
            self.n_params,
            self.n_nonembed,
        ];
        if fields.contains(&0) {
            return Err(invalid("architecture fields must be positive"));
        }
        if self.n_nonembed > self.n_params {
            return Err(invalid("non-embedding count exceeds total parameter count"));
        }
        Ok(())
    }

    /// Per layer: four `h × h` attention projections and three `h × k` MLP matrices.
    pub fn factorizable_per_layer(&self) -> [(u128, u128); 7] {
        let (h, k) = (self.h, self.k);
        [(h, h), (h, h), (h, h), (h, h), (h, k), (h, k), (h, k)]
    }
}

fn checked(parts: &[u128], what: &'static str) -> Result<u128> {
    parts
        .iter()
        .try_fold(1u128, |acc, &x| acc.checked_mul(x))
        .ok_or(Error::Overflow(what))
}

/// `b(sh + l(5sh + 2s²a + 4sk) + 2sv)` activation elements.
pub fn activation_elements(spec: &ArchSpec) -> Result<u128> {
    let ArchSpec {
        b,
        s,
        h,
        l,
        a,
        k,
        v,
        ..
    } = *spec;
    let per_layer = checked(&[5, s, h], "activations")?
        + checked(&[2, s, s, a], "activations")?
        + checked(&[4, s, k], "activations")?;
    let inner = checked(&[s, h], "activations")?
        + checked(&[l, per_layer], "activations")?
        + checked(&[2, s, v], "activations")?;
    checked(&[b, inner], "activations")
}

/// `bl(5sh + 2s²a + 4sk)`, the layer-dominated approximation.
pub fn activation_elements_simplified(spec: &ArchSpec) -> Result<u128> {
    let ArchSpec {
        b, s, h, l, a, k, ..
    } = *spec;
    let per_layer = checked(&[5, s, h], "activations")?
        + checked(&[2, s, s, a], "activations")?
        + checked(&[4, s, k], "activations")?;
    checked(&[b, l, per_layer], "activations")
}

/// Activation bytes at 2 bytes per element.
pub fn activation_memory(spec: &ArchSpec) -> Result<u128> {
    Ok(2 * activation_elements(spec)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub weight_bytes: u128,
    pub gradient_bytes: u128,
    pub optimizer_bytes: u128,
    pub activation_bytes: u128,
    pub total_bytes: u128,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryReportGb {
    pub weight: f64,
    pub gradient: f64,
    pub optimizer: f64,
    pub activation: f64,
    pub total: f64,
}

impl MemoryReport {
    pub fn gb(&self) -> MemoryReportGb {
        MemoryReportGb {
            weight: to_gib(self.weight_bytes),
            gradient: to_gib(self.gradient_bytes),
            optimizer: to_gib(self.optimizer_bytes),
            activation: to_gib(self.activation_bytes),
            total: to_gib(self.total_bytes),
        }
    }
}

/// Whole-model estimate. Full training uses `n_params` directly; other
/// methods apply the per-matrix rules to the seven projection matrices of
/// every layer and count the remaining parameters as dense.
pub fn total_memory_report(
    spec: &ArchSpec,
    method: Method,
    r: u128,
    delta: f64,
    convention: GradConvention,
) -> Result<MemoryReport> {
    let activation_bytes = activation_memory(spec)?;
    let dense = |params: u128| {
        method_memory_with(Method::Full, 1, 1, 0, 0.0, 0, convention).map(|unit| {
            (
                unit.weight * params,
                unit.gradient * params,
                unit.optimizer * params,
            )
        })
    };
    let (weight_bytes, gradient_bytes, optimizer_bytes) =
        if method == Method::Full || spec.n_params == 0 {
            dense(spec.n_params)?
        } else {
            let mats = spec.factorizable_per_layer();
            let covered: u128 = spec.l * mats.iter().map(|(m, n)| m * n).sum::<u128>();
            let rest = spec.n_params.checked_sub(covered).ok_or_else(|| {
                invalid("parameter count smaller than the projection matrices it must contain")
            })?;
            let (mut w, mut g, mut o) = dense(rest)?;
            for &(m, n) in &mats {
                let (short, long) = (m.min(n), m.max(n));
                let mem = method_memory_with(method, short, long, r, delta, spec.b, convention)?;
                w += spec.l * mem.weight;
                g += spec.l * mem.gradient;
                o += spec.l * mem.optimizer;
            }
            (w, g, o)
        };
    Ok(MemoryReport {
        weight_bytes,
        gradient_bytes,
        optimizer_bytes,
        activation_bytes,
        total_bytes: weight_bytes + gradient_bytes + optimizer_bytes + activation_bytes,
    })
}

/// `C = 6·N·B·S`.
pub fn flops(n_nonembed: u128, batch: u128, steps: u128) -> Result<u128> {
    if n_nonembed == 0 || batch == 0 || steps == 0 {
        return Err(invalid("FLOPs inputs must be positive"));
    }
    checked(&[6, n_nonembed, batch, steps], "flops")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_square_1024() {
        let m = method_memory(Method::Full, 1024, 1024, 0, 0.0, 1).unwrap();
        assert_eq!(m.weight, 2_097_152);
        assert_eq!(m.optimizer, 8_388_608);
        assert_eq!(m.gradient, 4_194_304);
        assert_eq!(m.activation, 2 * 2048);
    }

    #[test]
    fn fira_costs_four_more_bytes() {
        let g = method_memory(Method::GaLore, 512, 2048, 128, 0.0, 8).unwrap();
        let f = method_memory(Method::Fira, 512, 2048, 128, 0.0, 8).unwrap();
        assert_eq!(f.optimizer - g.optimizer, 4);
        assert_eq!(f.weight, g.weight);
    }

    #[test]
    fn rank_precondition() {
        assert!(method_memory(Method::LowRank, 4, 4, 0, 0.0, 1).is_err());
        assert!(method_memory(Method::GaLore, 4, 8, 5, 0.0, 1).is_err());
        assert!(method_memory(Method::Full, 4, 4, 0, 0.0, 1).is_ok());
    }

    #[test]
    fn llama7b_worked_example() {
        let spec = ArchSpec::llama_7b();
        assert_eq!(activation_elements(&spec).unwrap(), 12_957_253_632);
        let rep = total_memory_report(&spec, Method::Full, 0, 0.0, GradConvention::WorkedExample)
            .unwrap();
        let gb = rep.gb();
        let near = |x: f64, y: f64| (x - y).abs() <= 0.01;
        assert!(near(gb.weight, 13.04) && near(gb.gradient, 13.04));
        assert!(near(gb.optimizer, 26.08) && near(gb.activation, 24.13));
        assert!(near(gb.total, 76.29), "{gb:?}");
    }

    #[test]
    fn galore_7b_optimizer_below_full() {
        let spec = ArchSpec::llama_7b();
        let full = total_memory_report(&spec, Method::Full, 0, 0.0, GradConvention::WorkedExample)
            .unwrap();
        let gal = total_memory_report(
            &spec,
            Method::GaLore,
            512,
            0.0,
            GradConvention::WorkedExample,
        )
        .unwrap();
        assert!(gal.optimizer_bytes < full.optimizer_bytes);
        let low = total_memory_report(
            &spec,
            Method::LowRank,
            512,
            0.0,
            GradConvention::WorkedExample,
        )
        .unwrap();
        assert!(low.total_bytes < gal.total_bytes);
    }

    #[test]
    fn degenerate_specs() {
        let spec = ArchSpec {
            b: 1,
            s: 7,
            h: 5,
            l: 0,
            a: 3,
            k: 9,
            v: 0,
            n_params: 0,
            n_nonembed: 0,
        };
        assert_eq!(activation_elements(&spec).unwrap(), 35);
        let rep =
            total_memory_report(&spec, Method::GaLore, 2, 0.0, GradConvention::PerMatrix).unwrap();
        assert_eq!(
            rep.weight_bytes + rep.gradient_bytes + rep.optimizer_bytes,
            0
        );
        assert!(spec.validate().is_err());
    }

    #[test]
    fn simplified_form_drops_embedding_and_output_terms() {
        let spec = ArchSpec::llama_7b();
        let full = activation_elements(&spec).unwrap();
        let simple = activation_elements_simplified(&spec).unwrap();
        assert_eq!(full - simple, 2048 * 4096 + 2 * 2048 * 32000);
    }

    #[test]
    fn flops_law() {
        assert_eq!(flops(1, 1, 1).unwrap(), 6);
        let c = flops(1_339_000_000, 13_100_000_000, 1).unwrap();
        assert!((c as f64 / 1e18 - 105.2).abs() < 0.1);
        assert_eq!(flops(5, 3, 14).unwrap(), 2 * flops(5, 3, 7).unwrap());
        assert!(matches!(
            flops(u128::MAX / 2, 2, 1),
            Err(Error::Overflow(_))
        ));
        assert!(flops(0, 1, 1).is_err());
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("GaLore".parse::<Method>().unwrap(), Method::GaLore);
        assert_eq!("low-rank".parse::<Method>().unwrap(), Method::LowRank);
        assert!("adam-mini".parse::<Method>().is_err());
    }
}
