use crate::config::{ConfigError, Resolved};
use crate::dac::{fit_calibration_with_rail, group_by_channel, read_sweep_csv, DacError, Transfer};
use crate::scenario::{num, Outcome, Scenario, ScenarioError, Table};

/// Fits every configured sweep file and reports per-channel status.
pub struct Calibrate;

impl Scenario for Calibrate {
    fn name(&self) -> &'static str {
        "calibrate"
    }

    fn about(&self) -> &'static str {
        "fit per-channel calibration tables from measured sweeps"
    }

    fn run(&self, ctx: &Resolved) -> Result<Outcome, ScenarioError> {
        let dac = &ctx.config.dac;
        let mut table = Table::new([
            "source",
            "channel",
            "samples",
            "min_v",
            "max_v",
            "max_flattened_v",
            "status",
            "detail",
        ]);
        for file in &dac.calibration_files {
            let path = ctx.base_dir.join(file);
            let f = std::fs::File::open(&path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let rows = read_sweep_csv(f).map_err(|e| ScenarioError::domain("dac", e))?;
            for (ch, sweep) in group_by_channel(&rows) {
                let source = file.display().to_string();
                match fit_calibration_with_rail(ch, &sweep, dac.monotonic_tolerance_v, ctx.ideal.rail()) {
                    Ok(cal) => table.push([
                        source,
                        ch.to_string(),
                        sweep.len().to_string(),
                        num(cal.min_voltage()),
                        num(cal.max_voltage()),
                        num(cal.max_flattened_v()),
                        "ok".to_string(),
                        String::new(),
                    ]),
                    Err(e @ DacError::CalibrationRejected { .. }) => table.push([
                        source,
                        ch.to_string(),
                        sweep.len().to_string(),
                        String::new(),
                        String::new(),
                        String::new(),
                        "rejected".to_string(),
                        e.to_string(),
                    ]),
                    Err(e) => return Err(ScenarioError::domain("dac", e)),
                }
            }
        }
        Ok(table.into())
    }
}
