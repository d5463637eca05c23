//! Classification and removal of off-target training pairs.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SentencePair};
use crate::error::{Error, Result};
use crate::langid::LangIdModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NoiseLabel {
    OnTarget,
    SourceCopy,
    SourceMisalign,
    OtherOffTarget,
}

impl NoiseLabel {
    pub const ALL: [NoiseLabel; 4] = [
        NoiseLabel::OnTarget,
        NoiseLabel::SourceCopy,
        NoiseLabel::SourceMisalign,
        NoiseLabel::OtherOffTarget,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseLabel::OnTarget => "OnTarget",
            NoiseLabel::SourceCopy => "SourceCopy",
            NoiseLabel::SourceMisalign => "SourceMisalign",
            NoiseLabel::OtherOffTarget => "OtherOffTarget",
        }
    }
}

impl fmt::Display for NoiseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseLabel::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown noise label {s:?}")))
    }
}

/// Copies win over language detection; otherwise the detected language of the
/// target side decides.
pub fn classify_pair(model: &LangIdModel, pair: &SentencePair) -> Result<NoiseLabel> {
    let tgt = pair.tgt_text();
    if tgt == pair.src_text() {
        return Ok(NoiseLabel::SourceCopy);
    }
    let detected = model.identify(&tgt)?.language;
    Ok(if detected == pair.tgt_lang {
        NoiseLabel::OnTarget
    } else if detected == pair.src_lang {
        NoiseLabel::SourceMisalign
    } else {
        NoiseLabel::OtherOffTarget
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionNoise {
    pub src_lang: String,
    pub tgt_lang: String,
    pub total: usize,
    /// Indexed like [`NoiseLabel::ALL`].
    pub counts: [usize; 4],
    pub ratios: [f64; 4],
}

impl DirectionNoise {
    fn from_counts(src_lang: String, tgt_lang: String, counts: [usize; 4]) -> Self {
        let total: usize = counts.iter().sum();
        let ratios = counts.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 });
        DirectionNoise {
            src_lang,
            tgt_lang,
            total,
            counts,
            ratios,
        }
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.src_lang, self.tgt_lang)
    }

    pub fn count(&self, label: NoiseLabel) -> usize {
        self.counts[label.index()]
    }

    pub fn ratio(&self, label: NoiseLabel) -> f64 {
        self.ratios[label.index()]
    }

    pub fn off_target_ratio(&self) -> f64 {
        1.0 - self.ratio(NoiseLabel::OnTarget)
    }
}

/// Per-direction label tallies plus their macro average.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub directions: Vec<DirectionNoise>,
    pub average_ratios: [f64; 4],
    pub total: usize,
}

impl NoiseReport {
    pub fn from_directions(directions: Vec<DirectionNoise>) -> Self {
        let mut average_ratios = [0.0; 4];
        let nonempty: Vec<&DirectionNoise> = directions.iter().filter(|d| d.total > 0).collect();
        if !nonempty.is_empty() {
            for d in &nonempty {
                for (a, r) in average_ratios.iter_mut().zip(d.ratios) {
                    *a += r;
                }
            }
            for a in &mut average_ratios {
                *a /= nonempty.len() as f64;
            }
        }
        let total = directions.iter().map(|d| d.total).sum();
        NoiseReport {
            directions,
            average_ratios,
            total,
        }
    }

    pub fn merge(reports: impl IntoIterator<Item = NoiseReport>) -> Self {
        NoiseReport::from_directions(reports.into_iter().flat_map(|r| r.directions).collect())
    }

    pub fn average_off_target(&self) -> f64 {
        1.0 - self.average_ratios[NoiseLabel::OnTarget.index()]
    }

    /// CSV with one row per direction and a final macro-average row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "direction,total")?;
        for l in NoiseLabel::ALL {
            write!(w, ",{}", l.name())?;
        }
        writeln!(w, ",OffTarget")?;
        for d in &self.directions {
            write!(w, "{},{}", d.name(), d.total)?;
            for r in d.ratios {
                write!(w, ",{r:.6}")?;
            }
            writeln!(w, ",{:.6}", d.off_target_ratio())?;
        }
        write!(w, "average,{}", self.total)?;
        for r in self.average_ratios {
            write!(w, ",{r:.6}")?;
        }
        writeln!(w, ",{:.6}", self.average_off_target())
    }
}

/// Result of filtering one corpus.
#[derive(Clone, Debug)]
pub struct Filtered {
    pub clean: Corpus,
    pub removed: Corpus,
    pub labels: Vec<NoiseLabel>,
    pub report: NoiseReport,
}

/// Splits `corpus` into pairs to keep and pairs whose label is in `remove`.
/// The report tallies every label regardless of what is removed.
pub fn filter_corpus(model: &LangIdModel, corpus: &Corpus, remove: &BTreeSet<NoiseLabel>) -> Result<Filtered> {
    if remove.contains(&NoiseLabel::OnTarget) {
        return Err(Error::RemoveOnTarget);
    }
    let labels: Vec<NoiseLabel> = corpus
        .pairs()
        .par_iter()
        .map(|p| classify_pair(model, p))
        .collect::<Result<_>>()?;

    let mut report_dirs: Vec<((String, String), [usize; 4])> = Vec::new();
    for (p, l) in corpus.pairs().iter().zip(&labels) {
        let key = (p.src_lang.to_string(), p.tgt_lang.to_string());
        let slot = match report_dirs.iter_mut().find(|(k, _)| *k == key) {
            Some((_, counts)) => counts,
            None => {
                report_dirs.push((key, [0; 4]));
                &mut report_dirs.last_mut().unwrap().1
            }
        };
        slot[l.index()] += 1;
    }
    if report_dirs.is_empty() {
        if let Some((s, t)) = corpus.direction().or_else(|| {
            let langs: Vec<_> = corpus.languages().iter().cloned().collect();
            (langs.len() == 2).then(|| (langs[0].clone(), langs[1].clone()))
        }) {
            report_dirs.push(((s.to_string(), t.to_string()), [0; 4]));
        }
    }
    let report = NoiseReport::from_directions(
        report_dirs
            .into_iter()
            .map(|((s, t), counts)| DirectionNoise::from_counts(s, t, counts))
            .collect(),
    );

    let clean = corpus.select(|i| !remove.contains(&labels[i]));
    let removed = corpus.select(|i| remove.contains(&labels[i]));
    Ok(Filtered {
        clean,
        removed,
        labels,
        report,
    })
}
