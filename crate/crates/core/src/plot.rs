//! Hand-rolled SVG bar chart of per-label localization errors before and
//! after refinement. No drawing dependencies; output is a deterministic
//! string the pipeline writes next to the report CSV.

/// Two error series over the same labels, typically the per-label maximum
/// error across cases before and after sparse refinement.
#[derive(Debug, Clone)]
pub struct ErrorSeries<'a> {
    pub labels: &'a [String],
    pub before_mm: &'a [f64],
    pub after_mm: &'a [f64],
}

const CHART_HEIGHT: f64 = 220.0;
const BAR_WIDTH: f64 = 14.0;
const GROUP_GAP: f64 = 12.0;
const MARGIN_LEFT: f64 = 46.0;
const MARGIN_TOP: f64 = 28.0;
const MARGIN_BOTTOM: f64 = 34.0;

/// Renders grouped before/after bars per label.
///
/// The y axis is scaled to the rounded-up maximum of both series (minimum
/// 1 mm so an all-zero chart still has an axis).
pub fn render_error_chart(series: &ErrorSeries) -> String {
    assert_eq!(series.labels.len(), series.before_mm.len(), "one bar per label");
    assert_eq!(series.labels.len(), series.after_mm.len(), "one bar per label");
    let n = series.labels.len();
    let peak = series
        .before_mm
        .iter()
        .chain(series.after_mm)
        .fold(1.0f64, |a, &v| a.max(v));
    let y_max = peak.ceil();
    let group = 2.0 * BAR_WIDTH + GROUP_GAP;
    let width = MARGIN_LEFT + n as f64 * group + GROUP_GAP;
    let height = MARGIN_TOP + CHART_HEIGHT + MARGIN_BOTTOM;
    let baseline = MARGIN_TOP + CHART_HEIGHT;
    let scale = CHART_HEIGHT / y_max;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"10\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{MARGIN_LEFT}\" y=\"16\">max localization error (mm), before vs after refinement</text>\n"
    ));
    // Axes and y-grid at 0, half, full scale.
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" y2=\"{baseline}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_LEFT}\" y1=\"{baseline}\" x2=\"{:.1}\" y2=\"{baseline}\" stroke=\"black\"/>\n",
        width - GROUP_GAP
    ));
    for step in 0..=2 {
        let value = y_max * step as f64 / 2.0;
        let y = baseline - value * scale;
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{value}</text>\n",
            MARGIN_LEFT - 6.0,
            y + 3.0
        ));
    }
    for (i, label) in series.labels.iter().enumerate() {
        let x0 = MARGIN_LEFT + GROUP_GAP + i as f64 * group;
        for (slot, (value, class)) in [
            (series.before_mm[i], "before"),
            (series.after_mm[i], "after"),
        ]
        .iter()
        .enumerate()
        {
            let h = value.max(0.0) * scale;
            let fill = if *class == "before" { "#888888" } else { "#d95f02" };
            svg.push_str(&format!(
                "  <rect class=\"{class}\" x=\"{:.1}\" y=\"{:.1}\" width=\"{BAR_WIDTH}\" \
                 height=\"{h:.2}\" fill=\"{fill}\"/>\n",
                x0 + slot as f64 * BAR_WIDTH,
                baseline - h,
            ));
        }
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>\n",
            x0 + BAR_WIDTH,
            baseline + 14.0
        ));
    }
    // Legend.
    svg.push_str(&format!(
        "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"#888888\"/>\n  \
         <text x=\"{:.1}\" y=\"{:.1}\">before</text>\n",
        width - 120.0,
        8.0,
        width - 106.0,
        17.0
    ));
    svg.push_str(&format!(
        "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"#d95f02\"/>\n  \
         <text x=\"{:.1}\" y=\"{:.1}\">after</text>\n",
        width - 62.0,
        8.0,
        width - 48.0,
        17.0
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("T{i}")).collect()
    }

    #[test]
    fn chart_has_two_bars_per_label() {
        let labels = labels(3);
        let svg = render_error_chart(&ErrorSeries {
            labels: &labels,
            before_mm: &[12.0, 30.0, 8.0],
            after_mm: &[5.0, 6.0, 4.0],
        });
        assert_eq!(svg.matches("class=\"before\"").count(), 3);
        assert_eq!(svg.matches("class=\"after\"").count(), 3);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        for label in &labels {
            assert!(svg.contains(&format!(">{label}<")));
        }
    }

    #[test]
    fn bar_heights_scale_with_values() {
        let labels = labels(2);
        let svg = render_error_chart(&ErrorSeries {
            labels: &labels,
            before_mm: &[40.0, 20.0],
            after_mm: &[0.0, 0.0],
        });
        // Peak 40 fills the chart; 20 fills half; zero renders height 0.
        assert!(svg.contains("height=\"220.00\""));
        assert!(svg.contains("height=\"110.00\""));
        assert!(svg.contains("height=\"0.00\""));
    }

    #[test]
    fn rendering_is_deterministic() {
        let labels = labels(4);
        let series = ErrorSeries {
            labels: &labels,
            before_mm: &[1.0, 2.0, 3.0, 4.0],
            after_mm: &[0.5, 0.25, 1.0, 2.0],
        };
        assert_eq!(render_error_chart(&series), render_error_chart(&series));
    }

    #[test]
    fn zero_series_still_draws_an_axis() {
        let labels = labels(1);
        let svg = render_error_chart(&ErrorSeries {
            labels: &labels,
            before_mm: &[0.0],
            after_mm: &[0.0],
        });
        assert!(svg.contains("<line"));
    }
}
