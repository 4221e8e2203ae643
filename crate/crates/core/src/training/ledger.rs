use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Metrics observed at one training step (before that step's update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerRecord {
    pub step: u64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub adv: f64,
    pub speaker_accuracy: f64,
    pub perplexity: f64,
}

/// Per-step metrics in strictly increasing step order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLedger {
    records: Vec<LedgerRecord>,
}

/// Formats like C's `%.9g`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

impl LedgerRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            format_sig9(self.recon),
            format_sig9(self.codebook),
            format_sig9(self.commit),
            format_sig9(self.adv),
            format_sig9(self.speaker_accuracy),
            format_sig9(self.perplexity)
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(Error::invalid(format!("ledger line needs 7 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad ledger value `{}`", fields[i])))
        };
        let step = fields[0]
            .parse::<u64>()
            .map_err(|_| Error::invalid(format!("bad ledger step `{}`", fields[0])))?;
        Ok(Self {
            step,
            recon: num(1)?,
            codebook: num(2)?,
            commit: num(3)?,
            adv: num(4)?,
            speaker_accuracy: num(5)?,
            perplexity: num(6)?,
        })
    }

    fn is_finite(&self) -> bool {
        [self.recon, self.codebook, self.commit, self.adv, self.speaker_accuracy, self.perplexity]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Means of the final window of a ledger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSummary {
    pub recon: f64,
    pub speaker_accuracy: f64,
    pub perplexity: f64,
}

impl MetricsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: LedgerRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::invalid(format!("ledger step {} not after {}", r.step, last.step)));
            }
        }
        if !r.is_finite() {
            return Err(Error::invalid(format!("non-finite metrics at step {}", r.step)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut ledger = Self::new();
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            ledger.push(LedgerRecord::parse_line(line)?)?;
        }
        Ok(ledger)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Appends records `from..` to `path`.
    pub fn append_since(&self, path: impl AsRef<Path>, from: usize) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        for r in &self.records[from.min(self.records.len())..] {
            writeln!(f, "{}", r.to_line())?;
        }
        Ok(())
    }

    /// Means over the last `frac` of records (at least one record).
    pub fn final_window(&self, frac: f64) -> Result<WindowSummary> {
        if self.records.is_empty() {
            return Err(Error::invalid("empty ledger has no final window"));
        }
        let n = ((self.records.len() as f64 * frac).ceil() as usize).clamp(1, self.records.len());
        let tail = &self.records[self.records.len() - n..];
        let mean = |f: fn(&LedgerRecord) -> f64| tail.iter().map(f).sum::<f64>() / n as f64;
        Ok(WindowSummary {
            recon: mean(|r| r.recon),
            speaker_accuracy: mean(|r| r.speaker_accuracy),
            perplexity: mean(|r| r.perplexity),
        })
    }
}
