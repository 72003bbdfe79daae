//! Response types under the different monotonicity restrictions.
//!
//! A response type maps every instrument assignment in {0,1}^K to a potential
//! treatment level. Assignments are packed into integers with the first
//! instrument in the most significant bit, so for K=2 the canonical order is
//! 00, 01, 10, 11.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TYPE_CAP: u64 = 1_000_000;

/// Instrument assignment packed into bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Assignment {
    pub bits: u32,
    pub k: u8,
}

impl Assignment {
    pub fn all(k: usize) -> Vec<Assignment> {
        (0..1u32 << k).map(|bits| Assignment { bits, k: k as u8 }).collect()
    }

    /// Value of instrument `idx` (0-based, left to right).
    pub fn get(&self, idx: usize) -> u8 {
        ((self.bits >> (self.k as usize - 1 - idx)) & 1) as u8
    }

    pub fn with(&self, idx: usize, value: u8) -> Assignment {
        let bit = 1u32 << (self.k as usize - 1 - idx);
        let bits = if value == 1 { self.bits | bit } else { self.bits & !bit };
        Assignment { bits, k: self.k }
    }

    pub fn parse(s: &str) -> Result<Assignment> {
        let s = s.trim();
        if s.is_empty() || s.len() > 16 || !s.chars().all(|c| c == '0' || c == '1') {
            return Err(Error::invalid(format!("assignment `{s}` must be a string of 0/1")));
        }
        let bits = s.chars().fold(0u32, |acc, c| (acc << 1) | u32::from(c == '1'));
        Ok(Assignment { bits, k: s.len() as u8 })
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.k as usize {
            write!(f, "{}", self.get(i))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResponseType {
    pub k: usize,
    /// Potential treatment per assignment, indexed by `Assignment::bits`.
    pub potentials: Vec<u8>,
}

impl ResponseType {
    pub fn new(k: usize, potentials: Vec<u8>) -> Result<Self> {
        if potentials.len() != 1usize << k {
            return Err(Error::invalid(format!(
                "a type over {k} instruments needs {} potentials",
                1usize << k
            )));
        }
        Ok(Self { k, potentials })
    }

    pub fn at(&self, a: Assignment) -> u8 {
        self.potentials[a.bits as usize]
    }

    pub fn d00(&self) -> u8 {
        self.potentials[0]
    }

    pub fn d11(&self) -> u8 {
        self.potentials[(1usize << self.k) - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinedKind {
    Cc,
    Cn,
    Cd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CombinedType {
    pub d00: u8,
    pub d11: u8,
    pub kind: CombinedKind,
}

impl CombinedType {
    pub fn new(d00: u8, d11: u8) -> Self {
        let kind = match d11.cmp(&d00) {
            std::cmp::Ordering::Greater => CombinedKind::Cc,
            std::cmp::Ordering::Equal => CombinedKind::Cn,
            std::cmp::Ordering::Less => CombinedKind::Cd,
        };
        Self { d00, d11, kind }
    }
}

impl fmt::Display for CombinedType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            CombinedKind::Cc => "cc",
            CombinedKind::Cn => "cn",
            CombinedKind::Cd => "cd",
        };
        write!(f, "{tag}_{{{},{}}}", self.d00, self.d11)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum MonotonicityRule {
    None,
    /// Positive orientation: D at all-ones weakly above D at all-zeros.
    Lim,
    /// Mirrored orientation.
    LimNegative,
    /// One direction (+1/-1) per instrument.
    Pm { directions: Vec<i8> },
    /// Weak monotonicity along a caller-supplied total order of assignments.
    Iam { order: Vec<Assignment> },
}

impl MonotonicityRule {
    pub fn pm(directions: Vec<i8>) -> Result<Self> {
        if directions.is_empty() || directions.iter().any(|&d| d != 1 && d != -1) {
            return Err(Error::invalid("PM directions must be +1 or -1"));
        }
        Ok(Self::Pm { directions })
    }

    pub fn iam(order: Vec<Assignment>, k: usize) -> Result<Self> {
        let mut seen = vec![false; 1usize << k];
        for a in &order {
            if a.k as usize != k {
                return Err(Error::invalid(format!("assignment {a} does not have {k} instruments")));
            }
            if std::mem::replace(&mut seen[a.bits as usize], true) {
                return Err(Error::invalid(format!("assignment {a} repeated in IAM order")));
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::invalid("IAM order must cover every assignment"));
        }
        Ok(Self::Iam { order })
    }

    /// Parse `none`, `lim`, `lim-`, `pm:+-`, `iam`. `order` is a comma list
    /// of assignments for IAM; the canonical order is used when absent.
    pub fn parse(rule: &str, k: usize, order: Option<&str>) -> Result<Self> {
        match rule {
            "none" => Ok(Self::None),
            "lim" | "lim+" => Ok(Self::Lim),
            "lim-" => Ok(Self::LimNegative),
            "iam" => {
                let order = match order {
                    Some(s) => s.split(',').map(Assignment::parse).collect::<Result<Vec<_>>>()?,
                    None => Assignment::all(k),
                };
                Self::iam(order, k)
            }
            r if r.starts_with("pm") => {
                let dirs = r.strip_prefix("pm").unwrap().trim_start_matches(':');
                let dirs = if dirs.is_empty() { "+".repeat(k) } else { dirs.to_string() };
                let directions = dirs
                    .chars()
                    .map(|c| match c {
                        '+' => Ok(1),
                        '-' => Ok(-1),
                        _ => Err(Error::invalid(format!("bad PM direction `{c}`"))),
                    })
                    .collect::<Result<Vec<i8>>>()?;
                if directions.len() != k {
                    return Err(Error::invalid(format!("PM needs {k} directions, got {}", directions.len())));
                }
                Self::pm(directions)
            }
            other => Err(Error::invalid(format!("unknown monotonicity rule `{other}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::Lim => "lim".into(),
            Self::LimNegative => "lim-".into(),
            Self::Pm { directions } => {
                let d: String = directions.iter().map(|&v| if v > 0 { '+' } else { '-' }).collect();
                format!("pm:{d}")
            }
            Self::Iam { .. } => "iam".into(),
        }
    }
}

/// All `(J+1)^(2^K)` response types in lexicographic order of their
/// potentials listed along the canonical assignment order.
pub fn enumerate_types(j: usize, k: usize, cap: u64) -> Result<Vec<ResponseType>> {
    if j < 1 || k < 1 {
        return Err(Error::invalid("need J >= 1 and K >= 1"));
    }
    if j > u8::MAX as usize - 1 || k > 16 {
        return Err(Error::invalid("J or K too large"));
    }
    let slots = 1u32 << k;
    let base = (j + 1) as u128;
    let count = (0..slots).try_fold(1u128, |acc, _| acc.checked_mul(base)).unwrap_or(u128::MAX);
    if count > u128::from(cap) {
        return Err(Error::TypeCapExceeded { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut digits = vec![0u8; slots as usize];
    loop {
        out.push(ResponseType { k, potentials: digits.clone() });
        // odometer with the last assignment varying fastest
        let mut pos = digits.len();
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            if (digits[pos] as usize) < j {
                digits[pos] += 1;
                digits[pos + 1..].iter_mut().for_each(|v| *v = 0);
                break;
            }
        }
    }
}

pub fn classify(t: &ResponseType, rule: &MonotonicityRule) -> bool {
    match rule {
        MonotonicityRule::None => true,
        MonotonicityRule::Lim => t.d11() >= t.d00(),
        MonotonicityRule::LimNegative => t.d11() <= t.d00(),
        MonotonicityRule::Pm { directions } => {
            Assignment::all(t.k).into_iter().all(|a| {
                (0..t.k).filter(|&idx| a.get(idx) == 0).all(|idx| {
                    let hi = i32::from(t.at(a.with(idx, 1)));
                    let lo = i32::from(t.at(a));
                    i32::from(directions[idx]) * (hi - lo) >= 0
                })
            })
        }
        MonotonicityRule::Iam { order } => order.windows(2).all(|w| t.at(w[1]) >= t.at(w[0])),
    }
}

pub fn aggregate_combined(t: &ResponseType) -> CombinedType {
    CombinedType::new(t.d00(), t.d11())
}

/// sign(D^{z_m} - D^{z_{m-1}}) for consecutive assignments of `order`.
pub fn type_signs(t: &ResponseType, order: &[Assignment]) -> Vec<i8> {
    order
        .windows(2)
        .map(|w| match t.at(w[1]).cmp(&t.at(w[0])) {
            std::cmp::Ordering::Greater => 1,
            std::cmp::Ordering::Equal => 0,
            std::cmp::Ordering::Less => -1,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeRow {
    pub potentials: Vec<u8>,
    pub combined: String,
    pub allowed: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeTable {
    pub levels: usize,
    pub instruments: usize,
    pub assignments: Vec<String>,
    pub rules: Vec<String>,
    pub total: usize,
    pub allowed_counts: Vec<usize>,
    pub rows: Vec<TypeRow>,
}

/// Enumerate and classify against several rules at once.
pub fn type_table(j: usize, k: usize, rules: &[MonotonicityRule], cap: u64) -> Result<TypeTable> {
    let types = enumerate_types(j, k, cap)?;
    let rows: Vec<TypeRow> = types
        .iter()
        .map(|t| TypeRow {
            potentials: t.potentials.clone(),
            combined: aggregate_combined(t).to_string(),
            allowed: rules.iter().map(|r| classify(t, r)).collect(),
        })
        .collect();
    let allowed_counts = (0..rules.len())
        .map(|r| rows.iter().filter(|row| row.allowed[r]).count())
        .collect();
    Ok(TypeTable {
        levels: j + 1,
        instruments: k,
        assignments: Assignment::all(k).iter().map(ToString::to_string).collect(),
        rules: rules.iter().map(MonotonicityRule::label).collect(),
        total: rows.len(),
        allowed_counts,
        rows,
    })
}
