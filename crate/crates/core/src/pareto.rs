//! Bi-objective model selection over (predictive performance, fairness).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One trained model summarized by its validation objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCandidate<T> {
    pub id: String,
    pub hyperparams: BTreeMap<String, String>,
    /// Validation AUROC.
    pub p_pred: T,
    /// `1 - EO` on validation.
    pub p_fair: T,
}

impl<T: Scalar> ModelCandidate<T> {
    pub fn new(id: impl Into<String>, p_pred: T, p_fair: T) -> Result<Self> {
        let c = ModelCandidate {
            id: id.into(),
            hyperparams: BTreeMap::new(),
            p_pred,
            p_fair,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_hyperparams(mut self, hp: BTreeMap<String, String>) -> Self {
        self.hyperparams = hp;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p_pred", self.p_pred), ("p_fair", self.p_fair)] {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::invalid(format!("candidate `{}`: {name} = {v} outside [0, 1]", self.id)));
            }
        }
        Ok(())
    }
}

/// `a` is at least as good as `b` in both objectives and strictly better in one.
pub fn dominates<T: Scalar>(a: &ModelCandidate<T>, b: &ModelCandidate<T>) -> bool {
    a.p_pred >= b.p_pred && a.p_fair >= b.p_fair && (a.p_pred > b.p_pred || a.p_fair > b.p_fair)
}

/// Non-dominated candidates, ordered by descending `p_pred`, then descending
/// `p_fair`, then id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoSet<T> {
    members: Vec<ModelCandidate<T>>,
}

impl<T: Scalar> ParetoSet<T> {
    pub fn members(&self) -> &[ModelCandidate<T>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.members.iter().any(|m| m.id == id)
    }
}

fn frontier_order<T: Scalar>(a: &ModelCandidate<T>, b: &ModelCandidate<T>) -> Ordering {
    b.p_pred
        .partial_cmp(&a.p_pred)
        .unwrap_or(Ordering::Equal)
        .then(b.p_fair.partial_cmp(&a.p_fair).unwrap_or(Ordering::Equal))
        .then_with(|| a.id.cmp(&b.id))
}

/// The Pareto frontier. Candidates sharing an identical non-dominated point
/// are all kept.
pub fn pareto_frontier<T: Scalar>(candidates: &[ModelCandidate<T>]) -> Result<ParetoSet<T>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    for c in candidates {
        c.validate()?;
    }
    let mut sorted: Vec<&ModelCandidate<T>> = candidates.iter().collect();
    sorted.sort_by(|a, b| frontier_order(a, b));

    // Sweep blocks of equal p_pred. A candidate is dominated when an earlier
    // block (strictly higher p_pred) reaches its p_fair, or its own block
    // holds a strictly higher p_fair.
    let mut members = Vec::new();
    let mut best_fair: Option<T> = None;
    let mut i = 0;
    while i < sorted.len() {
        let pred = sorted[i].p_pred;
        let mut j = i;
        while j < sorted.len() && sorted[j].p_pred == pred {
            j += 1;
        }
        let block_max = sorted[i].p_fair;
        for c in &sorted[i..j] {
            let beaten_above = best_fair.is_some_and(|b| b >= c.p_fair);
            if !beaten_above && c.p_fair == block_max {
                members.push((*c).clone());
            }
        }
        best_fair = Some(best_fair.map_or(block_max, |b| b.max(block_max)));
        i = j;
    }
    Ok(ParetoSet { members })
}

/// How one model is picked from the frontier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Maximize `p_pred + p_fair`.
    #[default]
    Knee,
    MaxPred,
    MaxFair,
}

impl FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knee" => Ok(SelectionPolicy::Knee),
            "max_pred" => Ok(SelectionPolicy::MaxPred),
            "max_fair" => Ok(SelectionPolicy::MaxFair),
            other => Err(Error::Unknown {
                kind: "selection policy",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionPolicy::Knee => "knee",
            SelectionPolicy::MaxPred => "max_pred",
            SelectionPolicy::MaxFair => "max_fair",
        })
    }
}

fn desc<T: Scalar>(a: T, b: T) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Picks one frontier member. Ties fall back to the other objective, then to
/// the lexicographically smallest id.
pub fn select_final<T: Scalar>(frontier: &ParetoSet<T>, policy: SelectionPolicy) -> Result<ModelCandidate<T>> {
    let key = |a: &ModelCandidate<T>, b: &ModelCandidate<T>| -> Ordering {
        let primary = match policy {
            SelectionPolicy::Knee => desc(a.p_pred + a.p_fair, b.p_pred + b.p_fair).then(desc(a.p_fair, b.p_fair)),
            SelectionPolicy::MaxPred => desc(a.p_pred, b.p_pred).then(desc(a.p_fair, b.p_fair)),
            SelectionPolicy::MaxFair => desc(a.p_fair, b.p_fair).then(desc(a.p_pred, b.p_pred)),
        };
        primary.then_with(|| a.id.cmp(&b.id))
    };
    frontier
        .members
        .iter()
        .min_by(|a, b| key(a, b))
        .cloned()
        .ok_or(Error::Empty("Pareto frontier"))
}

const RESERVED: [&str; 4] = ["id", "p_pred", "p_fair", "on_frontier"];

/// Reads candidates from CSV with columns `id, p_pred, p_fair`; any other
/// column except `on_frontier` is taken as a hyperparameter.
pub fn read_candidates_csv<T: Scalar, R: Read>(reader: R) -> Result<Vec<ModelCandidate<T>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_col), Some(pred_col), Some(fair_col)) = (col("id"), col("p_pred"), col("p_fair")) else {
        let missing = ["id", "p_pred", "p_fair"]
            .into_iter()
            .filter(|c| col(c).is_none())
            .map(String::from)
            .collect();
        return Err(Error::MissingColumns {
            path: "<candidates>".into(),
            missing,
        });
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let num = |i: usize| -> Result<T> {
            row[i]
                .trim()
                .parse::<f64>()
                .map(T::lit)
                .map_err(|e| Error::invalid(format!("row `{}`: {e}", &row[id_col])))
        };
        let hyperparams = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| !RESERVED.contains(h))
            .map(|(i, h)| (h.to_string(), row[i].to_string()))
            .collect();
        let c = ModelCandidate {
            id: row[id_col].to_string(),
            hyperparams,
            p_pred: num(pred_col)?,
            p_fair: num(fair_col)?,
        };
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

/// Writes candidates with flattened hyperparameters. When `frontier` is given
/// an `on_frontier` column flags its members.
pub fn write_candidates_csv<T: Scalar, W: Write>(
    writer: W,
    candidates: &[ModelCandidate<T>],
    frontier: Option<&ParetoSet<T>>,
) -> Result<()> {
    let keys: BTreeSet<&String> = candidates.iter().flat_map(|c| c.hyperparams.keys()).collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "p_pred".into(), "p_fair".into()];
    header.extend(keys.iter().map(|k| k.to_string()));
    if frontier.is_some() {
        header.push("on_frontier".into());
    }
    w.write_record(&header)?;
    for c in candidates {
        let mut rec = vec![c.id.clone(), c.p_pred.to_string(), c.p_fair.to_string()];
        rec.extend(keys.iter().map(|k| c.hyperparams.get(*k).cloned().unwrap_or_default()));
        if let Some(f) = frontier {
            let on = f.members.iter().any(|m| m == c);
            rec.push(if on { "1" } else { "0" }.into());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("writing candidates", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(id: &str, p: f64, f: f64) -> ModelCandidate<f64> {
        ModelCandidate::new(id, p, f).unwrap()
    }

    fn ids(set: &ParetoSet<f64>) -> BTreeSet<String> {
        set.members().iter().map(|m| m.id.clone()).collect()
    }

    fn brute_force(cands: &[ModelCandidate<f64>]) -> BTreeSet<String> {
        cands
            .iter()
            .filter(|c| !cands.iter().any(|d| dominates(d, c)))
            .map(|c| c.id.clone())
            .collect()
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(&cand("a", 0.9, 0.9), &cand("b", 0.8, 0.8)));
        assert!(!dominates(&cand("a", 0.9, 0.9), &cand("b", 0.9, 0.9)));
        assert!(!dominates(&cand("a", 0.9, 0.7), &cand("b", 0.8, 0.8)));
        assert!(dominates(&cand("a", 0.9, 0.8), &cand("b", 0.9, 0.7)));
    }

    #[test]
    fn frontier_examples() {
        let c = [cand("a", 0.9, 0.9), cand("b", 0.8, 0.95), cand("c", 0.85, 0.85)];
        let f = pareto_frontier(&c).unwrap();
        assert_eq!(ids(&f), brute_force(&c));
        assert_eq!(f.members().iter().map(|m| m.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);

        let one = [cand("x", 0.5, 0.5)];
        assert_eq!(pareto_frontier(&one).unwrap().members(), &one);

        let same = [cand("p", 0.7, 0.6), cand("q", 0.7, 0.6), cand("r", 0.7, 0.6)];
        assert_eq!(pareto_frontier(&same).unwrap().len(), 3);

        assert!(pareto_frontier::<f64>(&[]).is_err());
        assert!(ModelCandidate::new("bad", 1.2, 0.5).is_err());
    }

    #[test]
    fn select_examples() {
        let f = pareto_frontier(&[cand("a", 0.9, 0.9), cand("b", 0.8, 0.95)]).unwrap();
        assert_eq!(select_final(&f, SelectionPolicy::Knee).unwrap().id, "a");
        assert_eq!(select_final(&f, SelectionPolicy::MaxPred).unwrap().id, "a");
        assert_eq!(select_final(&f, SelectionPolicy::MaxFair).unwrap().id, "b");

        let one = pareto_frontier(&[cand("only", 0.6, 0.6)]).unwrap();
        for p in [SelectionPolicy::Knee, SelectionPolicy::MaxPred, SelectionPolicy::MaxFair] {
            assert_eq!(select_final(&one, p).unwrap().id, "only");
        }

        let tie = pareto_frontier(&[cand("a", 0.9, 0.8), cand("b", 0.8, 0.9)]).unwrap();
        assert_eq!(select_final(&tie, SelectionPolicy::Knee).unwrap().id, "b");

        let dup = pareto_frontier(&[cand("z", 0.7, 0.7), cand("m", 0.7, 0.7)]).unwrap();
        assert_eq!(select_final(&dup, SelectionPolicy::Knee).unwrap().id, "m");

        assert!("pareto".parse::<SelectionPolicy>().is_err());
        assert_eq!("max_fair".parse::<SelectionPolicy>().unwrap(), SelectionPolicy::MaxFair);
    }

    #[test]
    fn csv_round_trip_with_flags() {
        let mut hp = BTreeMap::new();
        hp.insert("lr".to_string(), "0.001".to_string());
        let c = vec![
            cand("a", 0.9, 0.9).with_hyperparams(hp.clone()),
            cand("b", 0.8, 0.95).with_hyperparams(hp),
            cand("c", 0.85, 0.85),
        ];
        let f = pareto_frontier(&c).unwrap();
        let mut buf = Vec::new();
        write_candidates_csv(&mut buf, &c, Some(&f)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "id,p_pred,p_fair,lr,on_frontier");
        assert!(text.contains("c,0.85,0.85,,0"));
        let back: Vec<ModelCandidate<f64>> = read_candidates_csv(&buf[..]).unwrap();
        assert_eq!(back[0], c[0]);
        assert_eq!(back[2].hyperparams.get("lr").map(String::as_str), Some(""));

        let err = read_candidates_csv::<f64, _>("id,p_pred\na,0.5\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("p_fair"));
    }

    fn candidates() -> impl Strategy<Value = Vec<ModelCandidate<f64>>> {
        prop::collection::vec((0u8..=8, 0u8..=8), 1..=12).prop_map(|pts| {
            pts.into_iter()
                .enumerate()
                .map(|(i, (p, f))| cand(&format!("c{i:02}"), p as f64 / 8.0, f as f64 / 8.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn frontier_equals_brute_force(c in candidates()) {
            let f = pareto_frontier(&c).unwrap();
            prop_assert_eq!(ids(&f), brute_force(&c));
            for a in f.members() {
                for b in f.members() {
                    prop_assert!(!dominates(a, b));
                }
            }
        }

        #[test]
        fn frontier_permutation_invariant(c in candidates(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = c.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(pareto_frontier(&c).unwrap(), pareto_frontier(&shuffled).unwrap());
        }

        #[test]
        fn adding_dominated_or_dominating(c in candidates(), dp in 0u8..=8, df in 0u8..=8) {
            let f = pareto_frontier(&c).unwrap();
            let extra = cand("zz", dp as f64 / 8.0, df as f64 / 8.0);
            let mut more = c.clone();
            more.push(extra.clone());
            let g = pareto_frontier(&more).unwrap();
            if c.iter().any(|d| dominates(d, &extra)) {
                prop_assert_eq!(ids(&f), ids(&g));
            } else {
                let mut expect: BTreeSet<String> = f.members().iter()
                    .filter(|m| !dominates(&extra, m)).map(|m| m.id.clone()).collect();
                expect.insert("zz".into());
                prop_assert_eq!(expect, ids(&g));
            }
        }

        #[test]
        fn monotone_transform_keeps_membership(c in candidates()) {
            let t: Vec<_> = c.iter().map(|m| cand(&m.id, m.p_pred.powi(3), m.p_fair.sqrt())).collect();
            prop_assert_eq!(ids(&pareto_frontier(&c).unwrap()), ids(&pareto_frontier(&t).unwrap()));
        }
    }
}
