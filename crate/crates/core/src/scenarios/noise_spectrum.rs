use crate::analog::{log_grid, source_psd, NoiseBudget, SwitchState};
use crate::config::Resolved;
use crate::scenario::{num, Outcome, Scenario, ScenarioError, Table};

/// Electrode noise spectra for the bench fixture and the ion's view, with
/// the switch open and closed.
pub struct NoiseSpectrum;

/// Trace label and budget for every spectrum the scenario emits.
pub(crate) fn traces(ctx: &Resolved) -> Vec<(&'static str, NoiseBudget)> {
    vec![
        ("bench_eis_open", ctx.bench_budget(SwitchState::Open)),
        ("bench_eis_closed", ctx.bench_budget(SwitchState::Closed)),
        ("ion_eis_open", ctx.ion_budget(SwitchState::Open)),
        ("ion_eis_closed", ctx.ion_budget(SwitchState::Closed)),
    ]
}

pub(crate) fn grid(ctx: &Resolved) -> Result<Vec<f64>, ScenarioError> {
    let s = &ctx.config.spectrum;
    log_grid(s.f_min_hz, s.f_max_hz, s.points_per_decade, &s.extra_hz)
        .map_err(|e| ScenarioError::domain("analog", e))
}

impl Scenario for NoiseSpectrum {
    fn name(&self) -> &'static str {
        "noise-spectrum"
    }

    fn about(&self) -> &'static str {
        "electrode voltage noise spectra, switch open and closed"
    }

    fn run(&self, ctx: &Resolved) -> Result<Outcome, ScenarioError> {
        let freqs = grid(ctx)?;
        let mut table = Table::new(["trace", "freq_hz", "psd_v2_per_hz", "amplitude_v_per_rthz"]);
        let amp = ctx.amplifier_noise();
        for &f in &freqs {
            let p = source_psd(&amp, f);
            table.push(["amplifier_unfiltered".to_string(), num(f), num(p), num(p.sqrt())]);
        }
        for (label, budget) in traces(ctx) {
            for &f in &freqs {
                let p = budget.psd(f);
                table.push([label.to_string(), num(f), num(p), num(p.sqrt())]);
            }
        }
        Ok(table.into())
    }
}
