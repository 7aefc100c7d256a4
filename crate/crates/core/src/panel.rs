//! Longitudinal panel data: trajectories, at-risk sets, history design
//! matrices, and the long-format CSV representation.
//!
//! A trajectory with horizon `K` carries records for time points `0..=K+1`.
//! Within a time point the variables are observed in the order
//! `L_k -> C_k -> Y_k -> T_k`. When a subject is first censored at time `k`,
//! `L_k` is still observed but `Y_k`, `T_k` and everything after are missing.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Column header of the long-format panel CSV.
pub const CSV_HEADER: [&str; 11] = [
    "id", "time", "V1", "V2", "V3", "L1", "L2", "L3", "C", "Y", "T",
];

/// One time point of one subject. `None` marks a missing cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observation {
    /// CD4 count, CD4 fraction and weight-for-age z-score.
    pub l: Option<[f64; 3]>,
    /// `true` once the subject has left the study.
    pub censored: bool,
    pub y: Option<f64>,
    pub t: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    /// Static confounders: region (binary), sex (binary), age.
    pub v: [f64; 3],
    pub records: Vec<Observation>,
}

impl Trajectory {
    pub fn uncensored_at(&self, k: usize) -> bool {
        self.records.get(k).is_some_and(|r| !r.censored)
    }

    /// First censored time point, if any.
    pub fn censor_time(&self) -> Option<usize> {
        self.records.iter().position(|r| r.censored)
    }

    pub fn l(&self, k: usize) -> Result<[f64; 3]> {
        self.records.get(k).and_then(|r| r.l).ok_or_else(|| {
            Error::DataIntegrity(format!("subject {}: L missing at time {k}", self.id))
        })
    }

    pub fn y(&self, k: usize) -> Result<f64> {
        self.records.get(k).and_then(|r| r.y).ok_or_else(|| {
            Error::DataIntegrity(format!("subject {}: Y missing at time {k}", self.id))
        })
    }

    pub fn t(&self, k: usize) -> Result<bool> {
        self.records.get(k).and_then(|r| r.t).ok_or_else(|| {
            Error::DataIntegrity(format!("subject {}: T missing at time {k}", self.id))
        })
    }

    /// Observed treatments `T_0..T_{upto-1}`.
    pub fn treatments(&self, upto: usize) -> Result<Vec<bool>> {
        (0..upto).map(|j| self.t(j)).collect()
    }

    /// Count of treated time points among `T_0..=T_k`.
    pub fn cumulative_treatment(&self, k: usize) -> Result<usize> {
        Ok(self.treatments(k + 1)?.iter().filter(|&&t| t).count())
    }

    fn validate(&self, horizon: usize) -> Result<()> {
        let err = |msg: String| Error::DataIntegrity(format!("subject {}: {msg}", self.id));
        if self.records.len() != horizon + 2 {
            return Err(err(format!(
                "expected {} time points, found {}",
                horizon + 2,
                self.records.len()
            )));
        }
        if self.records[0].censored {
            return Err(err("censored at baseline".into()));
        }
        let mut was_censored = false;
        for (k, r) in self.records.iter().enumerate() {
            if was_censored && !r.censored {
                return Err(err(format!("non-monotone censoring at time {k}")));
            }
            let first_censored = r.censored && !was_censored;
            if r.censored {
                if r.y.is_some() || r.t.is_some() || (!first_censored && r.l.is_some()) {
                    return Err(err(format!("value present after censoring at time {k}")));
                }
            } else {
                if r.l.is_none() || r.y.is_none() {
                    return Err(err(format!("missing L or Y while uncensored at time {k}")));
                }
                if k <= horizon && r.t.is_none() {
                    return Err(err(format!("missing T while uncensored at time {k}")));
                }
            }
            was_censored = r.censored;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    horizon: usize,
    trajectories: Vec<Trajectory>,
}

impl Panel {
    /// Builds a panel after checking every trajectory invariant.
    pub fn new(horizon: usize, trajectories: Vec<Trajectory>) -> Result<Panel> {
        let mut ids = std::collections::HashSet::with_capacity(trajectories.len());
        for t in &trajectories {
            if !ids.insert(t.id) {
                return Err(Error::DataIntegrity(format!(
                    "duplicate subject id {}",
                    t.id
                )));
            }
            t.validate(horizon)?;
        }
        Ok(Panel {
            horizon,
            trajectories,
        })
    }

    /// Horizon `K`; records run over time points `0..=K+1`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Indices of subjects with `C_k = 0`.
    pub fn at_risk(&self, k: usize) -> Vec<usize> {
        self.trajectories
            .iter()
            .enumerate()
            .filter(|(_, t)| t.uncensored_at(k))
            .map(|(i, _)| i)
            .collect()
    }

    /// Canonical history design matrix over `at_risk(k)` with observed treatments.
    pub fn history_features(&self, k: usize, include_current_l: bool) -> Result<DesignMatrix> {
        let spec = FeatureSpec {
            time: k,
            include_current_l,
            include_current_y: false,
        };
        let rows = self.at_risk(k);
        DesignMatrix::build(self, &rows, &spec, |traj| traj.treatments(k))
    }
}

/// Which variables enter the history vector at time index `time`.
///
/// Columns: `V1,V2,V3`, then blocks `j = 0..=time` of `L1_j,L2_j,L3_j,Y_j,T_j`.
/// Blocks before `time` are complete; the block at `time` holds the current
/// `L` and `Y` only when switched on and never holds `T_time`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    pub time: usize,
    pub include_current_l: bool,
    pub include_current_y: bool,
}

impl FeatureSpec {
    /// The schedule whose width follows `5k + 6`.
    pub fn canonical(time: usize) -> FeatureSpec {
        FeatureSpec {
            time,
            include_current_l: true,
            include_current_y: false,
        }
    }

    pub fn width(&self) -> usize {
        3 + 5 * self.time
            + 3 * usize::from(self.include_current_l)
            + usize::from(self.include_current_y)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = vec!["V1".into(), "V2".into(), "V3".into()];
        for j in 0..=self.time {
            let current = j == self.time;
            if !current || self.include_current_l {
                names.extend([format!("L1_{j}"), format!("L2_{j}"), format!("L3_{j}")]);
            }
            if !current || self.include_current_y {
                names.push(format!("Y_{j}"));
            }
            if !current {
                names.push(format!("T_{j}"));
            }
        }
        names
    }

    /// Fills one row. `treatments[j]` supplies `T_j` for `j < time`.
    pub fn fill_row(
        &self,
        traj: &Trajectory,
        treatments: &[bool],
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if treatments.len() < self.time {
            return Err(Error::DimensionMismatch(format!(
                "need {} treatments, got {}",
                self.time,
                treatments.len()
            )));
        }
        out.extend_from_slice(&traj.v);
        for j in 0..=self.time {
            let current = j == self.time;
            if !current || self.include_current_l {
                out.extend_from_slice(&traj.l(j)?);
            }
            if !current || self.include_current_y {
                out.push(traj.y(j)?);
            }
            if !current {
                out.push(if treatments[j] { 1.0 } else { 0.0 });
            }
        }
        Ok(())
    }
}

/// Dense feature matrix with named columns; one row per selected subject.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub column_names: Vec<String>,
    pub rows: Vec<usize>,
    pub x: DMatrix<f64>,
}

impl DesignMatrix {
    /// Assembles rows for `subjects` (panel indices). `treatments` yields the
    /// treatment history to place in each row, which lets callers plug in
    /// regime values instead of the observed ones.
    pub fn build<F>(
        panel: &Panel,
        subjects: &[usize],
        spec: &FeatureSpec,
        mut treatments: F,
    ) -> Result<DesignMatrix>
    where
        F: FnMut(&Trajectory) -> Result<Vec<bool>>,
    {
        let width = spec.width();
        let mut data = Vec::with_capacity(subjects.len() * width);
        for &i in subjects {
            let traj = &panel.trajectories[i];
            let tr = treatments(traj)?;
            spec.fill_row(traj, &tr, &mut data)?;
        }
        Ok(DesignMatrix {
            column_names: spec.column_names(),
            rows: subjects.to_vec(),
            x: DMatrix::from_row_slice(subjects.len(), width, &data),
        })
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    /// Appends one column.
    pub fn with_column(mut self, name: &str, values: &[f64]) -> Result<DesignMatrix> {
        if values.len() != self.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "column {name} has {} values for {} rows",
                values.len(),
                self.nrows()
            )));
        }
        let n = self.x.ncols();
        self.x = self.x.insert_column(n, 0.0);
        for (r, v) in values.iter().enumerate() {
            self.x[(r, n)] = *v;
        }
        self.column_names.push(name.to_string());
        Ok(self)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes the panel in long format, one row per (id, time).
pub fn write_csv_to<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for traj in &panel.trajectories {
        for (k, r) in traj.records.iter().enumerate() {
            let l = r.l.map(|l| l.map(Some)).unwrap_or([None; 3]);
            w.write_record([
                traj.id.to_string(),
                k.to_string(),
                format!("{}", traj.v[0]),
                format!("{}", traj.v[1]),
                format!("{}", traj.v[2]),
                fmt_opt(l[0]),
                fmt_opt(l[1]),
                fmt_opt(l[2]),
                u8::from(r.censored).to_string(),
                fmt_opt(r.y),
                r.t.map(|t| u8::from(t).to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(panel: &Panel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(panel, std::io::BufWriter::new(file))
}

pub fn read_csv(path: &Path) -> Result<Panel> {
    read_csv_from(std::fs::File::open(path)?)
}

/// Parses a long-format panel. Errors name the offending line (1-based,
/// header is line 1).
pub fn read_csv_from<R: Read>(reader: R) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }

    struct Partial {
        v: [f64; 3],
        records: HashMap<usize, (usize, Observation)>,
    }
    let mut order: Vec<u64> = Vec::new();
    let mut subjects: HashMap<u64, Partial> = HashMap::new();
    let mut max_time = 0usize;

    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec?;
        let perr = |msg: String| Error::Parse { line, msg };
        if rec.len() != CSV_HEADER.len() {
            return Err(perr(format!(
                "expected {} fields, found {}",
                CSV_HEADER.len(),
                rec.len()
            )));
        }
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<Option<f64>> {
            let s = field(i);
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| perr(format!("column {}: bad number {s:?}", CSV_HEADER[i])))
            }
        };
        let flag = |i: usize| -> Result<Option<bool>> {
            match field(i) {
                "" => Ok(None),
                "0" => Ok(Some(false)),
                "1" => Ok(Some(true)),
                s => Err(perr(format!(
                    "column {}: expected 0/1, got {s:?}",
                    CSV_HEADER[i]
                ))),
            }
        };
        let id: u64 = field(0)
            .parse()
            .map_err(|_| perr(format!("bad id {:?}", field(0))))?;
        let time: usize = field(1)
            .parse()
            .map_err(|_| perr(format!("bad time {:?}", field(1))))?;
        let v = [
            num(2)?.ok_or_else(|| perr("missing V1".into()))?,
            num(3)?.ok_or_else(|| perr("missing V2".into()))?,
            num(4)?.ok_or_else(|| perr("missing V3".into()))?,
        ];
        let l = match (num(5)?, num(6)?, num(7)?) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            (None, None, None) => None,
            _ => return Err(perr("L1, L2, L3 must be all present or all missing".into())),
        };
        let censored = flag(8)?.ok_or_else(|| perr("missing C".into()))?;
        let obs = Observation {
            l,
            censored,
            y: num(9)?,
            t: flag(10)?,
        };
        let entry = subjects.entry(id).or_insert_with(|| {
            order.push(id);
            Partial {
                v,
                records: HashMap::new(),
            }
        });
        if entry.v != v {
            return Err(perr(format!(
                "static covariates change within subject {id}"
            )));
        }
        if entry.records.insert(time, (line, obs)).is_some() {
            return Err(perr(format!("duplicate (id, time) = ({id}, {time})")));
        }
        max_time = max_time.max(time);
    }

    if order.is_empty() {
        return Panel::new(0, Vec::new());
    }
    if max_time == 0 {
        return Err(Error::Parse {
            line: 2,
            msg: "panel needs at least time points 0 and 1".into(),
        });
    }
    let horizon = max_time - 1;
    let mut trajectories = Vec::with_capacity(order.len());
    for id in order {
        let mut p = subjects.remove(&id).expect("subject recorded");
        let mut records = Vec::with_capacity(horizon + 2);
        let mut prev_censored = false;
        for k in 0..=horizon + 1 {
            let (line, obs) = p.records.remove(&k).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("subject {id}: no row for time {k}"),
            })?;
            if prev_censored && !obs.censored {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-monotone censoring for subject {id} at time {k}"),
                });
            }
            prev_censored = obs.censored;
            records.push(obs);
        }
        let traj = Trajectory {
            id,
            v: p.v,
            records,
        };
        traj.validate(horizon).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        trajectories.push(traj);
    }
    Panel::new(horizon, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(l: [f64; 3], y: f64, t: Option<bool>) -> Observation {
        Observation {
            l: Some(l),
            censored: false,
            y: Some(y),
            t,
        }
    }

    pub(crate) fn two_step_subject() -> Trajectory {
        Trajectory {
            id: 9,
            v: [1.0, 0.0, 2.5],
            records: vec![
                obs([600.0, 0.2, -1.0], -0.5, Some(false)),
                obs([610.0, 0.21, -1.1], -0.4, Some(true)),
                obs([650.0, 0.22, -1.2], -0.3, Some(true)),
                obs([700.0, 0.23, -1.3], -0.2, None),
            ],
        }
    }

    #[test]
    fn canonical_widths_follow_schedule() {
        let widths: Vec<usize> = (1..=12)
            .map(|k| FeatureSpec::canonical(k).width())
            .collect();
        assert_eq!(widths, vec![11, 16, 21, 26, 31, 36, 41, 46, 51, 56, 61, 66]);
        for k in 0..15 {
            let s = FeatureSpec::canonical(k);
            assert_eq!(s.column_names().len(), s.width());
        }
    }

    #[test]
    fn history_row_by_hand() {
        let panel = Panel::new(2, vec![two_step_subject()]).unwrap();
        let dm = panel.history_features(2, true).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 0.0, 2.5,
            600.0, 0.2, -1.0, -0.5, 0.0,
            610.0, 0.21, -1.1, -0.4, 1.0,
            650.0, 0.22, -1.2,
        ];
        assert_eq!(dm.ncols(), 16);
        let row: Vec<f64> = dm.x.row(0).iter().copied().collect();
        assert_eq!(row, expected);
        assert_eq!(
            dm.column_names,
            vec![
                "V1", "V2", "V3", "L1_0", "L2_0", "L3_0", "Y_0", "T_0", "L1_1", "L2_1", "L3_1",
                "Y_1", "T_1", "L1_2", "L2_2", "L3_2"
            ]
        );
    }

    #[test]
    fn missing_cell_in_uncensored_row_is_rejected() {
        let mut t = two_step_subject();
        t.records[1].y = None;
        assert!(matches!(
            Panel::new(2, vec![t]),
            Err(Error::DataIntegrity(_))
        ));
    }

    #[test]
    fn non_monotone_censoring_is_rejected() {
        let mut t = two_step_subject();
        t.records[1] = Observation {
            l: Some([1.0, 0.1, 0.0]),
            censored: true,
            y: None,
            t: None,
        };
        assert!(Panel::new(2, vec![t]).is_err());
    }

    #[test]
    fn empty_panel_is_header_only() {
        let panel = Panel::new(3, vec![]).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&panel, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "id,time,V1,V2,V3,L1,L2,L3,C,Y,T\n"
        );
    }

    #[test]
    fn single_subject_round_trips() {
        let t = Trajectory {
            id: 1,
            v: [0.0, 1.0, 1.234_567_890_123_456_7],
            records: vec![
                obs([0.1 + 0.2, 0.06, -4.999_999_999_999], 1e-300, Some(true)),
                Observation {
                    l: Some([5000.5, 0.7, 3.3]),
                    censored: false,
                    y: Some(-9.87654321),
                    t: None,
                },
            ],
        };
        let panel = Panel::new(0, vec![t]).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&panel, &mut buf).unwrap();
        let back = read_csv_from(buf.as_slice()).unwrap();
        assert_eq!(back, panel);
    }

    #[test]
    fn censored_row_layout() {
        let mut t = two_step_subject();
        t.records[2] = Observation {
            l: Some([40.0, 0.1, -2.0]),
            censored: true,
            y: None,
            t: None,
        };
        t.records[3] = Observation {
            censored: true,
            ..Default::default()
        };
        let panel = Panel::new(2, vec![t]).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&panel, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("9,2,1,0,2.5,40,0.1,-2,1,,\n"));
        assert!(text.contains("9,3,1,0,2.5,,,,1,,\n"));
        assert_eq!(read_csv_from(buf.as_slice()).unwrap(), panel);
        assert_eq!(panel.at_risk(2), Vec::<usize>::new());
        assert_eq!(panel.at_risk(1), vec![0]);
    }

    #[test]
    fn parse_errors_name_the_row() {
        let bad_header = "id,time,V1\n1,0,1\n";
        assert!(matches!(
            read_csv_from(bad_header.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));

        let dup = "id,time,V1,V2,V3,L1,L2,L3,C,Y,T\n\
                   1,0,1,0,2,600,0.2,-1,0,0.1,0\n\
                   1,0,1,0,2,600,0.2,-1,0,0.1,0\n";
        match read_csv_from(dup.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let nonmono = "id,time,V1,V2,V3,L1,L2,L3,C,Y,T\n\
                       1,0,1,0,2,600,0.2,-1,0,0.1,0\n\
                       1,1,1,0,2,600,0.2,-1,1,,\n\
                       1,2,1,0,2,600,0.2,-1,0,0.1,\n";
        match read_csv_from(nonmono.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("non-monotone"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
