//! Episode logs: per-step state records plus discrete events, serializable
//! as line-delimited JSON.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use super::types::{Scene, Vec2};

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub joints: Vec<f64>,
    pub object_positions: Vec<Vec2>,
    pub held: Vec<bool>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEvent {
    Clamp {
        step: usize,
        joint: usize,
        commanded: f64,
        applied: f64,
    },
    Grasp {
        step: usize,
        object: usize,
    },
    Release {
        step: usize,
        object: usize,
    },
    Disturbance {
        step: usize,
        mode: String,
        displacement: Vec2,
    },
    TruncatedSentence {
        length: usize,
        max_len: usize,
    },
}

/// One line of the persisted episode log.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogLine {
    Meta { object_ids: Vec<(usize, usize)> },
    Step(StepRecord),
    Event(LogEvent),
}

#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct EpisodeLog {
    /// (shape_id, color_id) per scene object, fixed at episode start.
    pub object_ids: Vec<(usize, usize)>,
    pub steps: Vec<StepRecord>,
    pub events: Vec<LogEvent>,
}

impl EpisodeLog {
    pub fn for_scene(scene: &Scene) -> Self {
        let mut log = EpisodeLog {
            object_ids: scene.objects.iter().map(|o| (o.shape_id, o.color_id)).collect(),
            steps: Vec::new(),
            events: Vec::new(),
        };
        log.record_state(0, scene);
        log
    }

    /// Append the post-step state of the scene.
    pub fn record_state(&mut self, step: usize, scene: &Scene) {
        self.steps.push(StepRecord {
            step,
            joints: scene.arm.joints.clone(),
            object_positions: scene.objects.iter().map(|o| o.position).collect(),
            held: scene.objects.iter().map(|o| o.held).collect(),
        });
    }

    pub fn push_event(&mut self, e: LogEvent) {
        self.events.push(e);
    }

    /// Index of the object matching (shape_id, color_id), if unique.
    pub fn find_object(&self, shape_id: usize, color_id: usize) -> Option<usize> {
        let mut found = None;
        for (i, &(s, c)) in self.object_ids.iter().enumerate() {
            if s == shape_id && c == color_id {
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            }
        }
        found
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let meta = LogLine::Meta {
            object_ids: self.object_ids.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&meta)?)?;
        for s in &self.steps {
            writeln!(w, "{}", serde_json::to_string(&LogLine::Step(s.clone()))?)?;
        }
        for e in &self.events {
            writeln!(w, "{}", serde_json::to_string(&LogLine::Event(e.clone()))?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> std::io::Result<Self> {
        let mut log = EpisodeLog::default();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            match parsed {
                LogLine::Meta { object_ids } => log.object_ids = object_ids,
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Event(e) => log.events.push(e),
            }
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut log = EpisodeLog {
            object_ids: vec![(0, 1), (3, 2)],
            steps: Vec::new(),
            events: Vec::new(),
        };
        log.steps.push(StepRecord {
            step: 0,
            joints: vec![0.5, -0.25, 0.0, 1.0],
            object_positions: vec![Vec2::new(2.0, 0.8), Vec2::new(7.5, 0.8)],
            held: vec![false, false],
        });
        log.push_event(LogEvent::Grasp { step: 4, object: 0 });
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let back = EpisodeLog::read_jsonl(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(log, back);
    }
}
