//! Turns a released barrier into an MPI launch descriptor.
//!
//! Rank 0 gets a hostfile with one `slots=1` line per peer (one process per
//! GPU) and a launcher command wrapping the user command. Other ranks serve
//! and wait until the job is stopped.

use std::collections::BTreeMap;

use super::rendezvous::Proceed;

pub const HOSTFILE_PATH: &str = "/etc/acm/hostfile";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LaunchMode {
    /// Rank 0: run `command`, which starts the whole MPI world.
    Launcher { command: Vec<String> },
    /// Ranks 1..n: stay reachable until a stop request.
    ServeAndWait,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchDescriptor {
    pub rank: u32,
    pub size: u32,
    /// Peer addresses in rank order.
    pub hosts: Vec<String>,
    /// Rank 0 only.
    pub hostfile: Option<String>,
    pub mode: LaunchMode,
    /// `MPI_RANK`, `MPI_SIZE`, `MPI_HOSTS`.
    pub env: BTreeMap<String, String>,
}

pub fn hostfile(hosts: &[String]) -> String {
    hosts.iter().map(|h| format!("{h} slots=1\n")).collect()
}

pub fn mpi_bootstrap(proceed: &Proceed, user_command: &[String]) -> LaunchDescriptor {
    let hosts: Vec<String> = proceed.peers.iter().map(|p| p.address.clone()).collect();
    let env = BTreeMap::from([
        ("MPI_RANK".to_string(), proceed.rank.to_string()),
        ("MPI_SIZE".to_string(), proceed.size.to_string()),
        ("MPI_HOSTS".to_string(), hosts.join(",")),
    ]);
    let (hostfile, mode) = if proceed.rank == 0 {
        let mut command = vec![
            "mpirun".to_string(),
            "-np".to_string(),
            proceed.size.to_string(),
            "--hostfile".to_string(),
            HOSTFILE_PATH.to_string(),
        ];
        command.extend(user_command.iter().cloned());
        (Some(hostfile(&hosts)), LaunchMode::Launcher { command })
    } else {
        (None, LaunchMode::ServeAndWait)
    };
    LaunchDescriptor {
        rank: proceed.rank,
        size: proceed.size,
        hosts,
        hostfile,
        mode,
        env,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::rendezvous::{Credentials, Peer};

    fn proceed(n: u32, rank: u32) -> Proceed {
        Proceed {
            generation: 0,
            credentials: Credentials::from_bytes([0; 32]),
            peers: (0..n)
                .map(|i| Peer {
                    task_name: format!("worker-{i}"),
                    address: format!("10.0.0.{i}:2222"),
                })
                .collect(),
            rank,
            size: n,
        }
    }

    #[test]
    fn three_ranks_get_three_single_slot_lines() {
        let d = mpi_bootstrap(&proceed(3, 0), &["python".into(), "train.py".into()]);
        let hf = d.hostfile.unwrap();
        assert_eq!(hf.lines().count(), 3);
        assert!(hf.lines().all(|l| l.ends_with(" slots=1")));
        let LaunchMode::Launcher { command } = d.mode else {
            panic!()
        };
        assert_eq!(command[..3], ["mpirun", "-np", "3"]);
        assert_eq!(command[command.len() - 2..], ["python", "train.py"]);
        assert_eq!(d.env["MPI_HOSTS"], "10.0.0.0:2222,10.0.0.1:2222,10.0.0.2:2222");
    }

    #[test]
    fn single_rank_is_degenerate() {
        let d = mpi_bootstrap(&proceed(1, 0), &["true".into()]);
        assert_eq!(d.hostfile.as_deref(), Some("10.0.0.0:2222 slots=1\n"));
        assert_eq!(d.size, 1);
    }

    #[test]
    fn eight_processes_on_one_node_never_share_a_line() {
        // Eight single-GPU processes on one 8-GPU machine.
        let mut p = proceed(8, 0);
        for (i, peer) in p.peers.iter_mut().enumerate() {
            peer.address = format!("node-0/worker-{i}");
        }
        let d = mpi_bootstrap(&p, &[]);
        let hf = d.hostfile.unwrap();
        assert_eq!(hf.lines().count(), 8);
        assert!(!hf.contains("slots=8"));
        let ranks: Vec<_> = (0..8).map(|r| mpi_bootstrap(&proceed(8, r), &[]).rank).collect();
        assert_eq!(ranks, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn non_zero_ranks_serve_and_wait() {
        let d = mpi_bootstrap(&proceed(3, 2), &["x".into()]);
        assert_eq!(d.mode, LaunchMode::ServeAndWait);
        assert!(d.hostfile.is_none());
        assert_eq!(d.env["MPI_RANK"], "2");
    }
}
