//! Trajectory CSV files.
//!
//! The first line is a comment carrying the schema version, the scenario
//! hash and the loop mode; then a header row and one row per recorded step.
//! A final row at `k = N` holds the end state, with `u`, `y` and `dV` set
//! to `NaN`. Numbers use 17 significant digits so values round-trip.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use pidpbc_core::engine::{Mode, Plant, Trajectory};
use pidpbc_core::model::BuckBoostParams;
use pidpbc_core::verify::{ControllerView, LoggedEnergy, StepView};
use pidpbc_core::{controller, Gains};

pub const SCHEMA: u32 = 1;
pub const COLUMNS: [&str; 13] = [
    "k",
    "t",
    "x1",
    "x2",
    "i",
    "v",
    "u",
    "y",
    "H",
    "Hc",
    "V",
    "dV",
    "newton_iters",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub k: usize,
    pub t: f64,
    pub x1: f64,
    pub x2: f64,
    pub i: f64,
    pub v: f64,
    pub u: f64,
    pub y: f64,
    pub h: f64,
    pub hc: f64,
    pub lyap: f64,
    pub dv: f64,
    pub newton_iters: usize,
}

impl Row {
    fn fields(&self) -> Vec<String> {
        let f = |x: f64| format!("{x:.16e}");
        vec![
            self.k.to_string(),
            f(self.t),
            f(self.x1),
            f(self.x2),
            f(self.i),
            f(self.v),
            f(self.u),
            f(self.y),
            f(self.h),
            f(self.hc),
            f(self.lyap),
            f(self.dv),
            self.newton_iters.to_string(),
        ]
    }

    pub fn x(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.x1, self.x2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub schema: u32,
    pub scenario: String,
    pub mode: Mode,
    pub delta: f64,
}

impl Header {
    fn line(&self) -> String {
        format!(
            "# pidpbc-trajectory schema={} scenario={} mode={} delta={:.16e}",
            self.schema, self.scenario, self.mode, self.delta
        )
    }

    fn parse(line: &str) -> Result<Self, String> {
        let rest = line
            .trim()
            .strip_prefix("# pidpbc-trajectory")
            .ok_or_else(|| "missing `# pidpbc-trajectory` header line".to_string())?;
        let (mut schema, mut scenario, mut mode, mut delta) = (None, None, None, None);
        for kv in rest.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("bad header field `{kv}`"))?;
            match k {
                "schema" => schema = Some(v.parse::<u32>().map_err(|e| format!("schema: {e}"))?),
                "scenario" => scenario = Some(v.to_string()),
                "mode" => mode = Some(v.parse::<Mode>().map_err(|e| e.to_string())?),
                "delta" => delta = Some(v.parse::<f64>().map_err(|e| format!("delta: {e}"))?),
                _ => return Err(format!("unknown header field `{k}`")),
            }
        }
        let missing = |n: &str| format!("header lacks `{n}`");
        let h = Header {
            schema: schema.ok_or_else(|| missing("schema"))?,
            scenario: scenario.ok_or_else(|| missing("scenario"))?,
            mode: mode.ok_or_else(|| missing("mode"))?,
            delta: delta.ok_or_else(|| missing("delta"))?,
        };
        if h.schema != SCHEMA {
            return Err(format!("unsupported schema {}", h.schema));
        }
        Ok(h)
    }
}

/// Rows of a buck-boost trajectory, terminal row included.
pub fn rows(traj: &Trajectory<f64>, params: &BuckBoostParams<f64>, gains: &Gains) -> Vec<Row> {
    let mut out: Vec<Row> = traj
        .records
        .iter()
        .map(|r| Row {
            k: r.k,
            t: r.t,
            x1: r.x[0],
            x2: r.x[1],
            i: params.current(&r.x),
            v: params.voltage(&r.x),
            u: r.u[0],
            y: r.y[0],
            h: r.h,
            hc: r.hc,
            lyap: r.v,
            dv: r.dv,
            newton_iters: r.newton_iters,
        })
        .collect();
    let last = &traj.final_state;
    let seg = traj.segment_for(last.k);
    let h = pidpbc_core::buck_boost_model(params)
        .and_then(|m| m.shifted_storage(&last.x, &seg.eq.x_star))
        .unwrap_or(f64::NAN);
    let hc = controller::controller_storage(
        gains,
        &seg.eq,
        &last.xi,
        &last.x,
        &seg.xi_star,
        &seg.eq.x_star,
    )
    .unwrap_or(f64::NAN);
    out.push(Row {
        k: last.k,
        t: last.k as f64 * traj.delta,
        x1: last.x[0],
        x2: last.x[1],
        i: params.current(&last.x),
        v: params.voltage(&last.x),
        u: f64::NAN,
        y: f64::NAN,
        h,
        hc,
        lyap: (h + hc) / traj.delta,
        dv: f64::NAN,
        newton_iters: 0,
    });
    out
}

pub fn write<W: Write>(mut w: W, header: &Header, rows: &[Row]) -> std::io::Result<()> {
    writeln!(w, "{}", header.line())?;
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(COLUMNS)?;
    for r in rows {
        cw.write_record(r.fields())?;
    }
    cw.flush()?;
    Ok(())
}

/// Writes via a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, header: &Header, rows: &[Row]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    write(std::io::BufWriter::new(tmp.as_file_mut()), header, rows)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn read<R: Read>(r: R) -> Result<(Header, Vec<Row>), String> {
    let mut br = BufReader::new(r);
    let mut first = String::new();
    br.read_line(&mut first).map_err(|e| e.to_string())?;
    let header = Header::parse(&first)?;
    let mut cr = csv::Reader::from_reader(br);
    let cols = cr.headers().map_err(|e| e.to_string())?.clone();
    if cols.iter().ne(COLUMNS.iter().copied()) {
        return Err(format!(
            "unexpected columns {:?}",
            cols.iter().collect::<Vec<_>>()
        ));
    }
    let mut rows = Vec::new();
    for (line, rec) in cr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let num = |i: usize| -> Result<f64, String> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("row {}: column {}: {e}", line + 1, COLUMNS[i]))
        };
        let int = |i: usize| -> Result<usize, String> {
            rec[i]
                .trim()
                .parse::<usize>()
                .map_err(|e| format!("row {}: column {}: {e}", line + 1, COLUMNS[i]))
        };
        rows.push(Row {
            k: int(0)?,
            t: num(1)?,
            x1: num(2)?,
            x2: num(3)?,
            i: num(4)?,
            v: num(5)?,
            u: num(6)?,
            y: num(7)?,
            h: num(8)?,
            hc: num(9)?,
            lyap: num(10)?,
            dv: num(11)?,
            newton_iters: int(12)?,
        });
    }
    Ok((header, rows))
}

/// Step views from consecutive rows (`k`, `k+1`). Non-consecutive pairs,
/// as produced by decimated recording, are skipped.
pub fn step_views(rows: &[Row], mode: Mode) -> Vec<StepView<f64>> {
    rows.windows(2)
        .filter(|w| w[1].k == w[0].k + 1)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let (x, x_next) = (a.x(), b.x());
            let z = (mode == Mode::DtMidpoint).then(|| (&x + &x_next) * 0.5);
            StepView {
                k: a.k,
                x,
                x_next,
                z,
                u: DVector::from_element(1, a.u),
                y: DVector::from_element(1, a.y),
                controller: ControllerView::Logged,
                logged: Some(LoggedEnergy {
                    h: a.h,
                    hc: a.hc,
                    v: a.lyap,
                    dv: a.dv,
                }),
            }
        })
        .collect()
}

/// Buck-boost parameters of a plant, if it is one.
pub fn buck_boost(plant: &Plant<f64>) -> Option<&BuckBoostParams<f64>> {
    match plant {
        Plant::BuckBoost(p) => Some(p),
        Plant::General(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let h = Header {
            schema: SCHEMA,
            scenario: "00ff".into(),
            mode: Mode::DtEuler,
            delta: 6e-2,
        };
        assert_eq!(Header::parse(&h.line()).unwrap(), h);
        assert!(Header::parse("# other").is_err());
        assert!(
            Header::parse("# pidpbc-trajectory schema=2 scenario=a mode=dt-euler delta=1").is_err()
        );
    }

    #[test]
    fn values_round_trip_exactly() {
        let row = Row {
            k: 3,
            t: 0.1 + 0.2,
            x1: 1.0 / 3.0,
            x2: -2.2250738585072014e-308,
            i: std::f64::consts::PI,
            v: 1e300,
            u: f64::NAN,
            y: -0.0,
            h: 5e-324,
            hc: 123456789.12345679,
            lyap: f64::MAX,
            dv: f64::NAN,
            newton_iters: 7,
        };
        let h = Header {
            schema: SCHEMA,
            scenario: "ab".into(),
            mode: Mode::DtMidpoint,
            delta: 5e-3,
        };
        let mut buf = Vec::new();
        write(&mut buf, &h, std::slice::from_ref(&row)).unwrap();
        let (h2, rows) = read(buf.as_slice()).unwrap();
        assert_eq!(h2, h);
        let r = &rows[0];
        let bits = |r: &Row| {
            [r.t, r.x1, r.x2, r.i, r.v, r.u, r.y, r.h, r.hc, r.lyap, r.dv].map(|x| {
                if x.is_nan() {
                    u64::MAX
                } else {
                    x.to_bits()
                }
            })
        };
        assert_eq!(bits(r), bits(&row));
        assert_eq!((r.k, r.newton_iters), (3, 7));
    }
}
