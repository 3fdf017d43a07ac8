//! Telemetry data model, CSV log ingestion/emission and stream alignment.
//!
//! Canonical log layout (UTF-8, one header row, `\n` line endings):
//!
//! ```text
//! t,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,m1,m2,m3,m4,gt_edge,edge_kind,speed
//! ```
//!
//! Floating values are printed with 9 significant digits (C `%.9g`), so a
//! canonical file survives `emit_log(parse_log(bytes))` byte for byte.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::DroneParams;

pub const CSV_HEADER: &str = "t,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,m1,m2,m3,m4,gt_edge,edge_kind,speed";
const CSV_FIELDS: usize = 14;

/// Nominal telemetry rate.
pub const DEFAULT_SAMPLE_RATE: f64 = 100.0;

/// Names of the nine source channels, in order.
pub const SOURCE_CHANNELS: [&str; 9] =
    ["acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z", "m2_m1", "m3_m1", "m4_m1"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame, m/s².
    pub acc: [f64; 3],
    /// Body angular rate, rad/s.
    pub gyro: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorSample {
    pub t: f64,
    pub pwm: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Height,
    Material,
}

impl EdgeKind {
    fn code(self) -> &'static str {
        match self {
            EdgeKind::Height => "h",
            EdgeKind::Material => "m",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeEvent {
    pub t: f64,
    pub kind: EdgeKind,
    /// Distance along track, m.
    pub position: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightMeta {
    pub drone: DroneParams,
    /// Nominal horizontal speed, m/s.
    pub speed: f64,
}

impl Default for FlightMeta {
    fn default() -> Self {
        Self { drone: DroneParams::default(), speed: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightRecord {
    pub imu: Vec<ImuSample>,
    pub motors: Vec<MotorSample>,
    pub ground_truth: Vec<EdgeEvent>,
    pub meta: FlightMeta,
}

/// The nine-channel source series: IMU axes followed by motor differences.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSeries {
    pub t: Vec<f64>,
    pub channels: [Vec<f64>; 9],
}

impl SourceSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn sample_rate(&self) -> Option<f64> {
        if self.t.len() < 2 {
            return None;
        }
        Some((self.t.len() - 1) as f64 / (self.t[self.t.len() - 1] - self.t[0]))
    }
}

impl FlightRecord {
    pub fn len(&self) -> usize {
        self.imu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imu.is_empty()
    }

    /// Both streams share identical timestamps.
    pub fn is_aligned(&self) -> bool {
        self.imu.len() == self.motors.len() && self.imu.iter().zip(&self.motors).all(|(a, b)| a.t == b.t)
    }

    pub fn times(&self) -> Vec<f64> {
        self.imu.iter().map(|s| s.t).collect()
    }

    /// Surface class at time `t`: 0 before the first edge, toggling at every edge.
    pub fn surface_state(&self, t: f64) -> u8 {
        (self.ground_truth.iter().filter(|e| e.t <= t).count() % 2) as u8
    }

    /// Checks the record invariants.
    pub fn validate(&self) -> Result<()> {
        check_increasing(self.imu.iter().map(|s| s.t), "imu")?;
        check_increasing(self.motors.iter().map(|s| s.t), "motor")?;
        for s in &self.imu {
            if !s.acc.iter().chain(&s.gyro).all(|v| v.is_finite()) {
                return Err(Error::validation(format!("non-finite IMU value at t={}", s.t)));
            }
        }
        let pwm_max = self.meta.drone.pwm_max;
        for s in &self.motors {
            if !s.pwm.iter().all(|&m| m.is_finite() && (0.0..=pwm_max).contains(&m)) {
                return Err(Error::validation(format!("PWM outside [0, {pwm_max}] at t={}", s.t)));
            }
        }
        if let (Some(first), Some(last)) = (self.imu.first(), self.imu.last()) {
            for e in &self.ground_truth {
                if e.t < first.t || e.t > last.t {
                    return Err(Error::validation(format!(
                        "edge at t={} outside record span [{}, {}]",
                        e.t, first.t, last.t
                    )));
                }
            }
        }
        if !(self.meta.speed.is_finite() && self.meta.speed >= 0.0) {
            return Err(Error::validation("speed must be finite and non-negative"));
        }
        Ok(())
    }
}

fn check_increasing(times: impl Iterator<Item = f64>, stream: &str) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (i, t) in times.enumerate() {
        if !t.is_finite() {
            return Err(Error::validation(format!("{stream} timestamp {i} is not finite")));
        }
        if t <= prev {
            return Err(Error::validation(format!(
                "{stream} timestamps not strictly increasing at sample {i} (t={t}, previous {prev})"
            )));
        }
        prev = t;
    }
    Ok(())
}

/// Formats like C `printf("%.9g")`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent in {:e} output");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let mant = strip_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Parses a telemetry log with default drone parameters.
pub fn parse_log(bytes: &[u8]) -> Result<FlightRecord> {
    parse_log_with(bytes, &DroneParams::default())
}

/// Parses a telemetry log; `drone` is stored as the record metadata and
/// supplies the PWM range used for validation.
pub fn parse_log_with(bytes: &[u8], drone: &DroneParams) -> Result<FlightRecord> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse { line: 0, message: format!("not UTF-8: {e}") })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse { line: 1, message: format!("unexpected header {h:?}") });
        }
        None => return Err(Error::Parse { line: 1, message: "empty input".into() }),
    }

    let mut imu = Vec::new();
    let mut motors = Vec::new();
    let mut ground_truth = Vec::new();
    let mut speed: Option<f64> = None;

    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != CSV_FIELDS {
            return Err(Error::Parse {
                line,
                message: format!("expected {CSV_FIELDS} fields, found {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("field {} ({}) is not a number: {:?}", i + 1, header_name(i), fields[i]),
            })
        };
        let t = num(0)?;
        let acc = [num(1)?, num(2)?, num(3)?];
        let gyro = [num(4)?, num(5)?, num(6)?];
        let pwm = [num(7)?, num(8)?, num(9)?, num(10)?];
        let row_speed = num(13)?;
        let kind = match fields[12] {
            "" => None,
            "h" => Some(EdgeKind::Height),
            "m" => Some(EdgeKind::Material),
            other => return Err(Error::Parse { line, message: format!("unknown edge_kind {other:?}") }),
        };
        match (fields[11], kind) {
            ("0", None) => {}
            ("1", Some(kind)) => ground_truth.push(EdgeEvent { t, kind, position: row_speed * t }),
            ("1", None) => return Err(Error::Parse { line, message: "gt_edge=1 without edge_kind".into() }),
            ("0", Some(_)) => return Err(Error::Parse { line, message: "edge_kind set on a non-edge row".into() }),
            (other, _) => return Err(Error::Parse { line, message: format!("gt_edge must be 0 or 1, got {other:?}") }),
        }
        match speed {
            None => speed = Some(row_speed),
            Some(s) if s.to_bits() != row_speed.to_bits() => {
                return Err(Error::Parse { line, message: "speed must be constant within a log".into() });
            }
            _ => {}
        }
        imu.push(ImuSample { t, acc, gyro });
        motors.push(MotorSample { t, pwm });
    }

    let record = FlightRecord {
        imu,
        motors,
        ground_truth,
        meta: FlightMeta { drone: drone.clone(), speed: speed.unwrap_or(0.0) },
    };
    record.validate()?;
    Ok(record)
}

fn header_name(i: usize) -> &'static str {
    CSV_HEADER.split(',').nth(i).unwrap_or("?")
}

/// Writes a record in the canonical log format. Edge events are placed on
/// the sample nearest to their time.
pub fn emit_log(record: &FlightRecord) -> Result<Vec<u8>> {
    if !record.is_aligned() {
        return Err(Error::validation("emit_log requires aligned IMU and motor streams"));
    }
    let times = record.times();
    let mut marks: Vec<Option<EdgeKind>> = vec![None; times.len()];
    for e in &record.ground_truth {
        if let Some(i) = nearest_index(&times, e.t) {
            marks[i] = Some(e.kind);
        }
    }
    let speed = format_sig9(record.meta.speed);
    let mut out = String::with_capacity(times.len() * 120);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for ((imu, m), mark) in record.imu.iter().zip(&record.motors).zip(marks) {
        let mut row = String::with_capacity(128);
        row.push_str(&format_sig9(imu.t));
        for v in imu.acc.iter().chain(&imu.gyro).chain(&m.pwm) {
            row.push(',');
            row.push_str(&format_sig9(*v));
        }
        let (flag, kind) = match mark {
            Some(k) => ("1", k.code()),
            None => ("0", ""),
        };
        let _ = write!(row, ",{flag},{kind},{speed}");
        out.push_str(&row);
        out.push('\n');
    }
    Ok(out.into_bytes())
}

/// Index of the sample closest to `t` in a sorted time vector.
pub fn nearest_index(times: &[f64], t: f64) -> Option<usize> {
    if times.is_empty() {
        return None;
    }
    let i = times.partition_point(|&x| x < t);
    if i == 0 {
        return Some(0);
    }
    if i == times.len() {
        return Some(times.len() - 1);
    }
    Some(if (times[i] - t) < (t - times[i - 1]) { i } else { i - 1 })
}

/// Linear interpolation of a sampled signal at `t`; `ts` must be increasing.
/// Samples within `snap` of `t` are returned exactly.
fn interp<const N: usize>(ts: &[f64], vs: &[[f64; N]], t: f64, snap: f64) -> [f64; N] {
    let i = ts.partition_point(|&x| x < t);
    if i < ts.len() && (ts[i] - t).abs() <= snap {
        return vs[i];
    }
    if i > 0 && (t - ts[i - 1]).abs() <= snap {
        return vs[i - 1];
    }
    let i = i.clamp(1, ts.len() - 1);
    let (t0, t1) = (ts[i - 1], ts[i]);
    let w = (t - t0) / (t1 - t0);
    std::array::from_fn(|k| vs[i - 1][k] + w * (vs[i][k] - vs[i - 1][k]))
}

/// Resamples both streams onto a common uniform grid at `f_s` spanning the
/// overlap of the two streams.
pub fn align(record: &FlightRecord, f_s: f64) -> Result<FlightRecord> {
    if !(f_s.is_finite() && f_s > 0.0) {
        return Err(Error::invalid(format!("sample rate must be positive, got {f_s}")));
    }
    if record.imu.len() < 2 || record.motors.len() < 2 {
        return Err(Error::invalid("align needs at least two samples in each stream"));
    }
    check_increasing(record.imu.iter().map(|s| s.t), "imu")?;
    check_increasing(record.motors.iter().map(|s| s.t), "motor")?;

    let imu_t: Vec<f64> = record.imu.iter().map(|s| s.t).collect();
    let imu_v: Vec<[f64; 6]> = record
        .imu
        .iter()
        .map(|s| [s.acc[0], s.acc[1], s.acc[2], s.gyro[0], s.gyro[1], s.gyro[2]])
        .collect();
    let mot_t: Vec<f64> = record.motors.iter().map(|s| s.t).collect();
    let mot_v: Vec<[f64; 4]> = record.motors.iter().map(|s| s.pwm).collect();

    let start = imu_t[0].max(mot_t[0]);
    let end = imu_t[imu_t.len() - 1].min(mot_t[mot_t.len() - 1]);
    if end <= start {
        return Err(Error::invalid("IMU and motor streams do not overlap in time"));
    }
    let dt = 1.0 / f_s;
    let snap = 1e-9_f64.max(dt * 1e-6);
    let n = ((end - start) / dt + 1e-6).floor() as usize + 1;

    let mut imu = Vec::with_capacity(n);
    let mut motors = Vec::with_capacity(n);
    for k in 0..n {
        let grid = start + k as f64 * dt;
        // Keep the original timestamp when a sample already sits on the grid.
        let j = imu_t.partition_point(|&x| x < grid - snap);
        let t = if j < imu_t.len() && (imu_t[j] - grid).abs() <= snap { imu_t[j] } else { grid };
        let v = interp(&imu_t, &imu_v, t, snap);
        imu.push(ImuSample { t, acc: [v[0], v[1], v[2]], gyro: [v[3], v[4], v[5]] });
        motors.push(MotorSample { t, pwm: interp(&mot_t, &mot_v, t, snap) });
    }
    let (t0, t1) = (imu[0].t, imu[n - 1].t);
    let ground_truth = record.ground_truth.iter().copied().filter(|e| e.t >= t0 && e.t <= t1).collect();
    Ok(FlightRecord { imu, motors, ground_truth, meta: record.meta.clone() })
}

/// Builds the nine-channel source series `[acc, gyro, m2−m1, m3−m1, m4−m1]`.
pub fn build_source_vector(record: &FlightRecord) -> Result<SourceSeries> {
    if !record.is_aligned() {
        return Err(Error::validation("source vector requires an aligned record"));
    }
    let n = record.len();
    let mut channels: [Vec<f64>; 9] = std::array::from_fn(|_| Vec::with_capacity(n));
    for (imu, m) in record.imu.iter().zip(&record.motors) {
        let row = [
            imu.acc[0],
            imu.acc[1],
            imu.acc[2],
            imu.gyro[0],
            imu.gyro[1],
            imu.gyro[2],
            m.pwm[1] - m.pwm[0],
            m.pwm[2] - m.pwm[0],
            m.pwm[3] - m.pwm[0],
        ];
        for (c, v) in channels.iter_mut().zip(row) {
            c.push(v);
        }
    }
    Ok(SourceSeries { t: record.times(), channels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: &str, pwm: [&str; 4]) -> String {
        format!("{t},0.1,-0.2,9.81,0.01,0,-0.01,{},{},{},{},0,,0.5\n", pwm[0], pwm[1], pwm[2], pwm[3])
    }

    fn two_row_log() -> String {
        let mut s = format!("{CSV_HEADER}\n");
        s += &row("0", ["100", "150", "120", "90"]);
        s += &row("0.01", ["100", "150", "120", "90"]);
        s
    }

    #[test]
    fn sig9_matches_printf() {
        let cases = [
            (1.0, "1"),
            (0.1, "0.1"),
            (-2.5, "-2.5"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001, "1e-05"),
            (9.81, "9.81"),
            (std::f64::consts::PI, "3.14159265"),
            (9.9999999999, "10"),
            (65535.0, "65535"),
        ];
        for (x, want) in cases {
            assert_eq!(format_sig9(x), want, "x = {x}");
        }
    }

    #[test]
    fn parses_two_rows() {
        let rec = parse_log(two_row_log().as_bytes()).unwrap();
        assert_eq!(rec.imu.len(), 2);
        assert_eq!(rec.motors.len(), 2);
        assert_eq!(rec.meta.speed, 0.5);
        assert_eq!(rec.motors[1].pwm, [100.0, 150.0, 120.0, 90.0]);
    }

    #[test]
    fn short_row_reports_line() {
        let mut s = two_row_log();
        s += "0.02,1,2,3,4,5,6,7\n";
        match parse_log(s.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_monotonic_time_rejected() {
        let mut s = format!("{CSV_HEADER}\n");
        s += &row("0.02", ["1", "1", "1", "1"]);
        s += &row("0.01", ["1", "1", "1", "1"]);
        assert!(matches!(parse_log(s.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn pwm_out_of_range_rejected() {
        let mut s = format!("{CSV_HEADER}\n");
        s += &row("0", ["70000", "1", "1", "1"]);
        assert!(matches!(parse_log(s.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(parse_log(b"t,a,b\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn edge_rows_round_trip() {
        let mut s = format!("{CSV_HEADER}\n");
        s += "0,0,0,9.81,0,0,0,1,1,1,1,0,,0.5\n";
        s += "0.01,0,0,9.81,0,0,0,1,1,1,1,1,h,0.5\n";
        s += "0.02,0,0,9.81,0,0,0,1,1,1,1,1,m,0.5\n";
        let rec = parse_log(s.as_bytes()).unwrap();
        assert_eq!(rec.ground_truth.len(), 2);
        assert_eq!(rec.ground_truth[1].kind, EdgeKind::Material);
        assert_eq!(rec.ground_truth[0].position, 0.5 * 0.01);
        assert_eq!(emit_log(&rec).unwrap(), s.as_bytes());
    }

    #[test]
    fn source_vector_motor_differences() {
        let rec = parse_log(two_row_log().as_bytes()).unwrap();
        let src = build_source_vector(&rec).unwrap();
        assert_eq!(src.len(), 2);
        assert_eq!(src.channels[6][0], 50.0);
        assert_eq!(src.channels[7][0], 20.0);
        assert_eq!(src.channels[8][0], -10.0);
        assert_eq!(src.channels[0][0], 0.1);
        assert_eq!(src.channels[5][1], -0.01);
    }

    #[test]
    fn source_vector_rejects_unaligned() {
        let mut rec = parse_log(two_row_log().as_bytes()).unwrap();
        rec.motors.pop();
        assert!(build_source_vector(&rec).is_err());
    }

    #[test]
    fn equal_pwm_gives_zero_differences() {
        let mut s = format!("{CSV_HEADER}\n");
        for k in 0..5 {
            s += &row(&format!("{}", k as f64 * 0.01), ["4000", "4000", "4000", "4000"]);
        }
        let src = build_source_vector(&parse_log(s.as_bytes()).unwrap()).unwrap();
        for c in 6..9 {
            assert!(src.channels[c].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn align_uniform_is_fixed_point() {
        let mut s = format!("{CSV_HEADER}\n");
        for k in 0..50 {
            s += &row(&format_sig9(k as f64 * 0.01), ["4000", "4100", "3900", "4050"]);
        }
        let rec = parse_log(s.as_bytes()).unwrap();
        let aligned = align(&rec, 100.0).unwrap();
        assert_eq!(aligned, rec);
    }

    #[test]
    fn align_interpolates_slow_motor_stream() {
        let imu: Vec<ImuSample> = (0..5)
            .map(|k| ImuSample { t: k as f64 * 0.01, acc: [0.0, 0.0, 9.81], gyro: [0.0; 3] })
            .collect();
        // 50 Hz motors over the same span: 3 points.
        let motors = vec![
            MotorSample { t: 0.0, pwm: [100.0, 200.0, 300.0, 400.0] },
            MotorSample { t: 0.02, pwm: [200.0, 200.0, 100.0, 400.0] },
            MotorSample { t: 0.04, pwm: [300.0, 200.0, 300.0, 0.0] },
        ];
        let rec = FlightRecord { imu, motors, ground_truth: vec![], meta: FlightMeta::default() };
        let a = align(&rec, 100.0).unwrap();
        assert!(a.is_aligned());
        assert_eq!(a.len(), 5);
        let want = [
            [100.0, 200.0, 300.0, 400.0],
            [150.0, 200.0, 200.0, 400.0],
            [200.0, 200.0, 100.0, 400.0],
            [250.0, 200.0, 200.0, 200.0],
            [300.0, 200.0, 300.0, 0.0],
        ];
        for (m, w) in a.motors.iter().zip(want) {
            for (x, y) in m.pwm.iter().zip(w) {
                assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", m.pwm, w);
            }
        }
    }

    #[test]
    fn align_rejects_single_sample() {
        let rec = FlightRecord {
            imu: vec![ImuSample { t: 0.0, acc: [0.0; 3], gyro: [0.0; 3] }],
            motors: vec![MotorSample { t: 0.0, pwm: [0.0; 4] }],
            ground_truth: vec![],
            meta: FlightMeta::default(),
        };
        assert!(align(&rec, 100.0).is_err());
    }

    #[test]
    fn nearest_index_ties_go_left() {
        let ts = [0.0, 1.0, 2.0];
        assert_eq!(nearest_index(&ts, 0.5), Some(0));
        assert_eq!(nearest_index(&ts, 1.6), Some(2));
        assert_eq!(nearest_index(&ts, -3.0), Some(0));
        assert_eq!(nearest_index(&ts, 9.0), Some(2));
    }
}
