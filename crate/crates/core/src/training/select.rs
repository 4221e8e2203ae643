use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ledger::{format_sig9, WindowSummary};
use crate::error::{Error, Result};

/// Final-window metrics of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSummary {
    pub label: String,
    pub speaker_accuracy: f64,
    pub perplexity: f64,
    pub recon_loss: f64,
}

impl CandidateSummary {
    pub fn from_window(label: impl Into<String>, w: &WindowSummary) -> Self {
        Self {
            label: label.into(),
            speaker_accuracy: w.speaker_accuracy,
            perplexity: w.perplexity,
            recon_loss: w.recon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionThresholds {
    /// Highest acceptable speaker accuracy (fraction).
    pub acc_max: f64,
    /// Lowest acceptable codebook perplexity.
    pub ppl_min: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self {
            acc_max: 0.2,
            ppl_min: 64.0,
        }
    }
}

impl SelectionThresholds {
    /// Defaults for a codebook of `k` entries: `ppl_min = k/2`.
    pub fn for_codebook(k: usize) -> Self {
        Self {
            acc_max: 0.2,
            ppl_min: k as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateVerdict {
    pub summary: CandidateSummary,
    pub acc_ok: bool,
    pub ppl_ok: bool,
}

impl CandidateVerdict {
    pub fn passes(&self) -> bool {
        self.acc_ok && self.ppl_ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub thresholds: SelectionThresholds,
    pub verdicts: Vec<CandidateVerdict>,
    /// Indices into `verdicts`, best first.
    pub ranking: Vec<usize>,
    /// False when no candidate met both thresholds and the fallback order was used.
    pub criteria_met: bool,
}

impl SelectionReport {
    pub fn selected(&self) -> &CandidateSummary {
        &self.verdicts[self.ranking[0]].summary
    }

    /// Line-oriented report: one `candidate` line per run, then `rank` and `selected`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# thresholds\tacc_max={}\tppl_min={}",
            format_sig9(self.thresholds.acc_max),
            format_sig9(self.thresholds.ppl_min)
        );
        for v in &self.verdicts {
            let c = &v.summary;
            let _ = writeln!(
                s,
                "candidate\t{}\tspk_acc={}\tppl={}\trecon={}\tacc_ok={}\tppl_ok={}",
                c.label,
                format_sig9(c.speaker_accuracy),
                format_sig9(c.perplexity),
                format_sig9(c.recon_loss),
                v.acc_ok,
                v.ppl_ok
            );
        }
        let order: Vec<&str> = self.ranking.iter().map(|&i| self.verdicts[i].summary.label.as_str()).collect();
        let _ = writeln!(s, "rank\t{}", order.join("\t"));
        if !self.criteria_met {
            let _ = writeln!(s, "flag\tno candidate meets criteria");
        }
        let _ = writeln!(s, "selected\t{}", self.selected().label);
        s
    }
}

/// Keeps candidates with `acc ≤ acc_max` and `ppl ≥ ppl_min`, ranked by
/// ascending reconstruction loss. If none survive, every candidate is ranked
/// by accuracy, then reconstruction loss, and the report is flagged.
/// Remaining ties keep input order.
pub fn select_model(candidates: &[CandidateSummary], thresholds: &SelectionThresholds) -> Result<SelectionReport> {
    if candidates.is_empty() {
        return Err(Error::invalid("model selection needs at least one candidate"));
    }
    let verdicts: Vec<CandidateVerdict> = candidates
        .iter()
        .map(|c| CandidateVerdict {
            summary: c.clone(),
            acc_ok: c.speaker_accuracy <= thresholds.acc_max,
            ppl_ok: c.perplexity >= thresholds.ppl_min,
        })
        .collect();
    let mut survivors: Vec<usize> = (0..verdicts.len()).filter(|&i| verdicts[i].passes()).collect();
    let criteria_met = !survivors.is_empty();
    if criteria_met {
        survivors.sort_by(|&a, &b| verdicts[a].summary.recon_loss.total_cmp(&verdicts[b].summary.recon_loss));
        let rest: Vec<usize> = (0..verdicts.len()).filter(|i| !survivors.contains(i)).collect();
        survivors.extend(rest);
    } else {
        survivors = (0..verdicts.len()).collect();
        survivors.sort_by(|&a, &b| {
            let (x, y) = (&verdicts[a].summary, &verdicts[b].summary);
            x.speaker_accuracy
                .total_cmp(&y.speaker_accuracy)
                .then(x.recon_loss.total_cmp(&y.recon_loss))
        });
    }
    Ok(SelectionReport {
        thresholds: thresholds.clone(),
        verdicts,
        ranking: survivors,
        criteria_met,
    })
}

/// Reads `label<TAB>spk_acc<TAB>ppl<TAB>recon` rows; `spk_acc` may carry a `%` suffix.
pub fn read_summary_table(path: impl AsRef<Path>) -> Result<Vec<CandidateSummary>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        let bad = || Error::invalid(format!("{}:{}: expected label, spk_acc, ppl, recon", path.display(), n + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let acc = match f[1].strip_suffix('%') {
            Some(p) => p.parse::<f64>().map_err(|_| bad())? / 100.0,
            None => f[1].parse::<f64>().map_err(|_| bad())?,
        };
        out.push(CandidateSummary {
            label: f[0].to_string(),
            speaker_accuracy: acc,
            perplexity: f[2].parse().map_err(|_| bad())?,
            recon_loss: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
