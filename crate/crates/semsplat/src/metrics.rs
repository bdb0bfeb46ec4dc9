//! Newline-delimited JSON metrics log.

use std::io::Write;

use serde::Serialize;

use semsplat_core::train::MetricsRecord;

#[derive(Serialize)]
struct Line {
    iter: u64,
    l_color: f64,
    l_2d: f64,
    l_3d: f64,
    l_hard: f64,
    l_soft: f64,
    l_gl: f64,
    total: f64,
    n_gaussians: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    psnr_holdout: Option<f64>,
}

/// One JSON object, without the trailing newline.
pub fn to_json(r: &MetricsRecord) -> String {
    let t = &r.terms;
    serde_json::to_string(&Line {
        iter: r.iter,
        l_color: t.l_color,
        l_2d: t.l_2d,
        l_3d: t.l_3d,
        l_hard: t.l_hard,
        l_soft: t.l_soft,
        l_gl: t.l_gl,
        total: t.total,
        n_gaussians: r.n_gaussians,
        psnr_holdout: r.psnr_holdout,
    })
    .expect("finite metrics serialize")
}

pub fn write_line(out: &mut impl Write, r: &MetricsRecord) -> std::io::Result<()> {
    writeln!(out, "{}", to_json(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use semsplat_core::optim::LossTerms;

    #[test]
    fn keys_are_fixed_and_psnr_is_optional() {
        let mut r = MetricsRecord { iter: 3, terms: LossTerms { total: 0.5, ..Default::default() }, n_gaussians: 9, psnr_holdout: None };
        let line = to_json(&r);
        assert_eq!(
            line,
            r#"{"iter":3,"l_color":0.0,"l_2d":0.0,"l_3d":0.0,"l_hard":0.0,"l_soft":0.0,"l_gl":0.0,"total":0.5,"n_gaussians":9}"#
        );
        r.psnr_holdout = Some(21.25);
        assert!(to_json(&r).ends_with(r#""n_gaussians":9,"psnr_holdout":21.25}"#));
    }
}
