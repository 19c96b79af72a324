use std::fs::File;
use std::io::BufWriter;

use crate::config::Resolved;
use crate::scenario::{num, Outcome, Scenario, ScenarioError, Table};
use crate::transport::{
    shuttle_scenario, simulate_electrode_voltage, EisSchedule, ShuttlePlan, ShuttleReport,
    TransportError, Waveform,
};

/// Runs the configured shuttle and returns its report.
pub fn shuttle(ctx: &Resolved) -> Result<(ShuttleReport, Waveform, EisSchedule), ScenarioError> {
    let t = &ctx.config.transport;
    let plan = ShuttlePlan {
        bus: &ctx.transport_bus,
        net: &ctx.ion_network,
        eis: &ctx.eis,
        transfers: &ctx.transfers,
        v_start: ctx.v_start,
        v_end: ctx.v_end,
        tolerance: ctx.tolerance_v,
        cycles: t.cycles,
    };
    shuttle_scenario(t.distance_m, t.speed_m_per_s, &plan)
        .map_err(|e| ScenarioError::domain("transport", e))
}

/// Back-and-forth shuttle over the configured distance and speed.
pub struct Transport;

impl Scenario for Transport {
    fn name(&self) -> &'static str {
        "transport"
    }

    fn about(&self) -> &'static str {
        "plan and verify a shuttle waveform with the switch closed"
    }

    fn run(&self, ctx: &Resolved) -> Result<Outcome, ScenarioError> {
        let (r, waveform, schedule) = shuttle(ctx)?;
        let t = &ctx.config.transport;
        let out_err = |e: std::io::Error| ScenarioError::Output(e.to_string());
        let tr_err = |e: TransportError| ScenarioError::domain("transport", e);
        if let Some(path) = &t.waveform_out {
            let f = File::create(ctx.base_dir.join(path)).map_err(out_err)?;
            waveform.write_csv(BufWriter::new(f)).map_err(tr_err)?;
        }
        if let Some(path) = &t.schedule_out {
            let f = File::create(ctx.base_dir.join(path)).map_err(out_err)?;
            schedule.write_csv(BufWriter::new(f)).map_err(tr_err)?;
        }
        if let Some(path) = &t.trace_out {
            let trace = simulate_electrode_voltage(
                &waveform,
                &ctx.ion_network,
                &ctx.eis,
                &schedule,
                &waveform.entries()[0].levels,
                t.sample_dt_s,
            )
            .map_err(tr_err)?;
            let f = File::create(ctx.base_dir.join(path)).map_err(out_err)?;
            trace.write_csv(BufWriter::new(f)).map_err(tr_err)?;
        }

        let mut table = Table::new(["quantity", "value", "unit"]);
        let rows: [(&str, String, &str); 13] = [
            ("distance", num(r.distance_m), "m"),
            ("speed", num(r.speed_m_per_s), "m/s"),
            ("duration", num(r.duration_s), "s"),
            ("frame_count", r.frame_count.to_string(), "frames"),
            ("frame_spacing", num(r.frame_spacing_s), "s"),
            ("frame_period", num(r.frame_period_s), "s"),
            ("max_step", num(r.max_step_v), "V"),
            ("max_settle_time", num(r.max_settle_s), "s"),
            ("flagged_steps", r.flagged_steps.to_string(), "steps"),
            ("monotone_tracking", r.monotone.to_string(), "bool"),
            ("return_error", num(r.return_error_v), "V"),
            ("cycles_requested", r.cycles_requested.to_string(), "cycles"),
            ("cycles_feasible", r.cycles_feasible.to_string(), "cycles"),
        ];
        for (q, v, u) in rows {
            table.push([q.to_string(), v, u.to_string()]);
        }
        Ok(table.into())
    }
}
