//! CSV rendering of round metrics.

use crate::orchestrator::RoundMetrics;

pub const CSV_HEADER: &str =
    "round,accuracy,test_ce,mean_L1,mean_L2,mean_L3,noise_retained,noise_mean_iters,wall_ms";

/// `%.9g`: nine significant digits, trailing zeros trimmed, exponent form
/// outside `[1e-4, 1e9)`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_owned()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    } else {
        s
    }
}

/// One CSV row. `wall_ms` is written as 0 unless `timing` is set, so reruns
/// produce identical files.
pub fn csv_row(m: &RoundMetrics, timing: bool) -> String {
    let l = m.mean_losses();
    format!(
        "{},{},{},{},{},{},{},{},{}",
        m.round,
        format_sig9(m.accuracy),
        format_sig9(m.test_ce),
        format_sig9(l.l1),
        format_sig9(l.l2),
        format_sig9(l.l3),
        m.noise_retained,
        format_sig9(m.noise_mean_iterations),
        format_sig9(if timing { m.wall_ms } else { 0.0 }),
    )
}

pub fn metrics_csv(history: &[RoundMetrics], timing: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&csv_row(m, timing));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::LossBreakdown;

    #[test]
    fn sig9_matches_printf() {
        let cases = [
            (0.9152, "0.9152"),
            (1.0, "1"),
            (1.0 / 3.0, "0.333333333"),
            (2.0 / 3.0, "0.666666667"),
            (123456789.4, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (99999999950.0, "1e+11"),
            (0.0, "0"),
        ];
        for (v, want) in cases {
            assert_eq!(format_sig9(v), want, "{v}");
        }
    }

    #[test]
    fn rows_follow_header() {
        let m = RoundMetrics {
            round: 3,
            active: vec![0, 1],
            accuracy: 0.5,
            test_ce: 1.25,
            client_losses: vec![
                (0, LossBreakdown { total: 1.0, l1: 1.0, l2: 0.2, l3: 0.0 }),
                (1, LossBreakdown { total: 3.0, l1: 3.0, l2: 0.4, l3: 0.0 }),
            ],
            noise_retained: 7,
            noise_mean_iterations: 12.5,
            empty_noise_clients: vec![],
            wall_ms: 10.0,
        };
        assert_eq!(csv_row(&m, false), "3,0.5,1.25,2,0.3,0,7,12.5,0");
        assert_eq!(csv_row(&m, true), "3,0.5,1.25,2,0.3,0,7,12.5,10");
        let csv = metrics_csv(&[m], false);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 9);
    }
}
