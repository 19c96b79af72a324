use crate::config::Resolved;
use crate::protocol::{DacCode, CHANNELS};
use crate::scenario::{num, Outcome, Scenario, ScenarioError, Table};

/// Code sweep of every channel through its transfer (ideal or calibrated).
pub struct TransferSweep;

impl Scenario for TransferSweep {
    fn name(&self) -> &'static str {
        "transfer-sweep"
    }

    fn about(&self) -> &'static str {
        "output voltage versus code for all 16 channels"
    }

    fn run(&self, ctx: &Resolved) -> Result<Outcome, ScenarioError> {
        let step = ctx.config.dac.sweep_code_step;
        let mut codes: Vec<DacCode> = DacCode::all().step_by(step).collect();
        if codes.last() != Some(&DacCode::MAX) {
            codes.push(DacCode::MAX);
        }
        let mut table = Table::new(["channel", "code", "volts"]);
        for ch in 0..CHANNELS {
            let transfer = ctx.transfers.channel(ch);
            for &code in &codes {
                table.push([ch.to_string(), code.to_string(), num(transfer.voltage(code))]);
            }
        }
        Ok(table.into())
    }
}
