use crate::analog::{eis_isolation_db, pole_frequency, rf_leakage_fraction};
use crate::config::Resolved;
use crate::scenario::{num, Outcome, Scenario, ScenarioError, Table};

/// Shunt-capacitor design table: RF leakage, closed-switch bandwidth and
/// open-switch isolation for each coupling/shunt pair.
pub struct Leakage;

impl Scenario for Leakage {
    fn name(&self) -> &'static str {
        "leakage"
    }

    fn about(&self) -> &'static str {
        "shunt capacitor sizing: RF leakage, bandwidth, isolation"
    }

    fn run(&self, ctx: &Resolved) -> Result<Outcome, ScenarioError> {
        let l = &ctx.config.leakage;
        let isolation_col = "isolation_open_db";
        let mut table = Table::new([
            "c_couple_f",
            "c_shunt_f",
            "leakage_fraction",
            "bandwidth_closed_hz",
            isolation_col,
            "isolation_freq_hz",
            "meets_leakage_limit",
        ]);
        let open = ctx.eis.with_state(crate::analog::SwitchState::Open);
        for &cc in &l.c_couple_f {
            for &cs in &l.c_shunt_f {
                let frac = rf_leakage_fraction(cc, cs);
                table.push([
                    num(cc),
                    num(cs),
                    num(frac),
                    num(pole_frequency(ctx.eis.r_closed(), cs)),
                    num(eis_isolation_db(&open, cs, l.isolation_hz)),
                    num(l.isolation_hz),
                    (frac <= l.max_fraction).to_string(),
                ]);
            }
        }
        Ok(table.into())
    }
}
