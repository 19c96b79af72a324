use crate::analog::SwitchState;
use crate::config::Resolved;
use crate::constants::TWO_PI;
use crate::ion::{expected_open_rate_bound, fit_deff, heating_rate, noise_from_heating, TrapMode};
use crate::scenario::{num, Outcome, Scenario, ScenarioError, Table};

/// Trap mode with `d_eff` either configured or fitted to the selected
/// measurements.
pub fn fitted_mode(ctx: &Resolved) -> Result<TrapMode, ScenarioError> {
    let ion = &ctx.config.ion;
    let omega = TWO_PI * ion.trap_hz;
    let d_eff = match ion.d_eff_m {
        Some(d) => d,
        None => {
            let selected: Vec<_> = ctx
                .measurements
                .iter()
                .filter(|(label, _)| ion.fit_labels.is_empty() || ion.fit_labels.contains(label))
                .map(|(_, m)| *m)
                .collect();
            fit_deff(&selected, omega, &ctx.ion).map_err(|e| ScenarioError::domain("ion", e))?
        }
    };
    TrapMode::new(omega, d_eff, ion.anomalous_baseline_per_s)
        .map_err(|e| ScenarioError::domain("ion", e))
}

/// Heating rates and voltage noise, both directions, plus the open-switch
/// bound and the rates implied by the modeled electrode noise.
pub struct Heating;

impl Scenario for Heating {
    fn name(&self) -> &'static str {
        "heating"
    }

    fn about(&self) -> &'static str {
        "heating rate <-> voltage noise, effective distance fit"
    }

    fn run(&self, ctx: &Resolved) -> Result<Outcome, ScenarioError> {
        let mode = fitted_mode(ctx)?;
        let d = num(mode.d_eff());
        let f = num(mode.freq_hz());
        let mut table = Table::new([
            "kind",
            "label",
            "s_v_amplitude_v_per_rthz",
            "rate_per_s",
            "d_eff_m",
            "omega_hz",
        ]);
        let mut row = |kind: &str, label: &str, amp: f64, rate: f64| {
            table.push([kind.to_string(), label.to_string(), num(amp), num(rate), d.clone(), f.clone()]);
        };
        for (label, m) in &ctx.measurements {
            row("measured", label, m.s_v_amplitude, m.rate);
        }
        for (label, m) in &ctx.measurements {
            let predicted = heating_rate(m.s_v_amplitude * m.s_v_amplitude, &mode, &ctx.ion);
            row("predicted", label, m.s_v_amplitude, predicted);
        }
        for (label, m) in &ctx.measurements {
            let inferred =
                noise_from_heating(m.rate, &mode, &ctx.ion).map_err(|e| ScenarioError::domain("ion", e))?;
            row("inferred", label, inferred, m.rate);
        }
        let floor = ctx.config.analog.analyzer_floor_v_per_rthz;
        row(
            "open_bound",
            "analyzer_floor",
            floor,
            expected_open_rate_bound(floor, &mode, &ctx.ion),
        );
        for (label, state) in [("eis_closed", SwitchState::Closed), ("eis_open", SwitchState::Open)] {
            let psd = ctx.ion_budget(state).psd(mode.freq_hz());
            row("electrode_model", label, psd.sqrt(), heating_rate(psd, &mode, &ctx.ion));
        }
        Ok(table.into())
    }
}
