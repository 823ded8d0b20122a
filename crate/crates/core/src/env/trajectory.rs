use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Action, EnvError, EnvState};

/// One line of a trajectory dump: the state reached, the action that led
/// there, and its reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode: u64,
    pub step: u32,
    pub action: Action,
    pub reward: f32,
    pub done: bool,
    pub state: EnvState,
}

pub fn write_trajectory<W: Write>(
    mut out: W,
    records: &[TrajectoryRecord],
) -> Result<(), EnvError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectory<R: BufRead>(input: R) -> Result<Vec<TrajectoryRecord>, EnvError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EnvError::Trajectory {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, Mission};

    #[test]
    fn dump_reads_back() {
        let env = Env::new(Mission::basic()).unwrap();
        let (mut s, _) = env.reset(5);
        let mut records = Vec::new();
        for (i, a) in [Action::Forward, Action::TurnLeft, Action::Forward]
            .into_iter()
            .enumerate()
        {
            let out = env.step(&s, a).unwrap();
            records.push(TrajectoryRecord {
                episode: 0,
                step: i as u32,
                action: a,
                reward: out.reward,
                done: out.done,
                state: out.state,
            });
            s = out.state;
        }
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &records).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 3);
        assert_eq!(read_trajectory(buf.as_slice()).unwrap(), records);
        assert!(matches!(
            read_trajectory("{not json}\n".as_bytes()),
            Err(EnvError::Trajectory { line: 1, .. })
        ));
    }
}
