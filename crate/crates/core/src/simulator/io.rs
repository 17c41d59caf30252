use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::{
    ActionRecord, EventTimeline, LabelMap, MeanField, Trajectory, TrajectoryRecord,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    t: usize,
    m: Vec<f64>,
    r: String,
    actions: Vec<LineAction>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LineAction {
    agent: String,
    action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<LabelMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

/// One JSON object per record, newline-terminated. Actions are written by
/// label in `event`'s action space.
pub fn write_trajectory_jsonl(
    trajectory: &Trajectory,
    event: &EventTimeline,
    mut out: impl Write,
) -> Result<()> {
    for rec in &trajectory.records {
        let actions = rec
            .actions
            .iter()
            .map(|a| {
                if a.action_index >= event.actions.len() {
                    return Err(Error::Shape(format!(
                        "action index {} out of range",
                        a.action_index
                    )));
                }
                Ok(LineAction {
                    agent: a.agent_id.clone(),
                    action: event.actions.label(a.action_index).to_string(),
                    labels: a.labels.clone(),
                    text: a.text.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let line = Line {
            t: rec.t,
            m: rec.mean_field.probs().to_vec(),
            r: rec.synopsis.clone(),
            actions,
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::Parse(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trajectory_to_jsonl(trajectory: &Trajectory, event: &EventTimeline) -> Result<String> {
    let mut buf = Vec::new();
    write_trajectory_jsonl(trajectory, event, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Inverse of [`write_trajectory_jsonl`]. Action timesteps are restored
/// from the event's step times.
pub fn read_trajectory_jsonl(text: &str, event: &EventTimeline) -> Result<Trajectory> {
    let mut records = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line =
            serde_json::from_str(raw).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        let timestep = match line.t {
            0 => 0,
            t => event.steps.get(t - 1).map(|s| s.t).ok_or_else(|| {
                Error::Horizon(format!(
                    "record t={t} beyond the event's {} steps",
                    event.horizon()
                ))
            })?,
        };
        let actions = line
            .actions
            .into_iter()
            .map(|a| {
                let action_index =
                    event
                        .actions
                        .index_of(&a.action)
                        .ok_or_else(|| Error::UnknownLabel {
                            label: a.action.clone(),
                            context: "action space".into(),
                        })?;
                Ok(ActionRecord {
                    agent_id: a.agent,
                    timestep,
                    action_index,
                    text: a.text,
                    labels: a.labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(TrajectoryRecord {
            t: line.t,
            mean_field: MeanField::new(line.m)?,
            synopsis: line.r,
            actions,
        });
    }
    Ok(Trajectory {
        event_id: event.event_id.clone(),
        records,
    })
}
