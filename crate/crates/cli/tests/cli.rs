mod common;

use std::path::Path;

use common::*;

fn config(c: &Cluster, name: &str, replicas: u32, script: &str) -> String {
    c.write(
        &format!("{name}.yaml"),
        &job_yaml(name, replicas, "plain", script, None),
    )
    .display()
    .to_string()
}

#[test]
fn submit_then_status_and_single_task_logs() {
    let c = Cluster::local();
    let cfg = config(&c, "hello", 2, "echo hi from $TASK_NAME");
    let out = c.acmctl(&["submit", "--config", &cfg, "--follow"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some("job-1"));
    assert!(text.contains("[worker-0] hi from worker-0"), "{text}");
    assert!(text.contains("job-1: Running -> Succeeded"), "{text}");
    assert!(text.trim_end().ends_with("job-1 Succeeded"));

    let out = c.acmctl(&["status", "job-1"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("state:      Succeeded"));
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("worker-")).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.contains("Succeeded")));

    let out = c.acmctl(&["logs", "job-1", "--task", "worker-1"]);
    assert_eq!(stdout(&out), "hi from worker-1\n");
    let out = c.acmctl(&["logs", "job-1"]);
    assert_eq!(
        stdout(&out),
        "[worker-0] hi from worker-0\n[worker-1] hi from worker-1\n"
    );
}

#[test]
fn follow_exit_code_mirrors_the_job() {
    let c = Cluster::local();
    let cfg = config(&c, "fails", 1, "echo about to fail; exit 3");
    let out = c.acmctl(&["submit", "--config", &cfg, "--follow"]);
    assert_eq!(code(&out), 1, "{}", stdout(&out));
    assert!(stdout(&out).contains("exited with code 3"));
    assert!(stdout(&out).trim_end().ends_with("job-1 Failed"));

    let out = c.acmctl(&["logs", "job-1", "--follow"]);
    assert_eq!(code(&out), 1);
    assert_eq!(stdout(&out), "about to fail\njob-1 Failed\n");
}

#[test]
fn invalid_submissions_exit_2() {
    let c = Cluster::local();
    let bad = c.write(
        "bad.yaml",
        &job_yaml("bad", 1, "plain", "true", None).replace("instance_type: local", "instance_type: tpu"),
    );
    let out = c.acmctl(&["submit", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("UnknownInstanceType"), "{}", stderr(&out));
    assert!(stderr(&out).contains("unknown instance type \"tpu\""));

    let out = c.acmctl(&["submit", "--config", "/nonexistent.yaml"]);
    assert_eq!(code(&out), 2);
    let cfg = config(&c, "ok", 1, "true");
    let out = c.acmctl(&["submit", "--config", &cfg, "--tar", "/nonexistent-dir"]);
    assert_eq!(code(&out), 2);
    let garbage = c.write("garbage.yaml", "tasks: 7\n");
    assert_eq!(code(&c.acmctl(&["submit", "--config", garbage.to_str().unwrap()])), 2);
    assert_eq!(code(&c.acmctl(&["frobnicate"])), 2);
    assert_eq!(code(&c.acmctl(&["status", "seven"])), 2);
    assert_eq!(code(&c.acmctl(&["list", "--state", "bogus"])), 2);
}

#[test]
fn client_and_network_errors() {
    let c = Cluster::local();
    let cfg = config(&c, "quick", 1, "true");
    assert_eq!(code(&c.acmctl(&["submit", "--config", &cfg, "--follow"])), 0);

    let out = c.acmctl(&["cancel", "job-1"]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("409"), "{}", stderr(&out));
    assert_eq!(code(&c.acmctl(&["status", "job-42"])), 4);
    assert_eq!(code(&acmctl_at(&c.server.endpoint(), "wrong", &["list"])), 4);

    // Nothing listens on port 9 of the loopback.
    let out = acmctl_at("http://127.0.0.1:9", TOKEN, &["list"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn cancel_running_job() {
    let c = Cluster::local();
    let cfg = config(&c, "sleepy", 2, "sleep 30");
    assert_eq!(code(&c.acmctl(&["submit", "--config", &cfg])), 0);
    let out = c.acmctl(&["cancel", "job-1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out), "job-1 Canceled\n");
}

#[test]
fn machine_output_is_one_json_record_per_line() {
    let c = Cluster::local();
    let cfg = config(&c, "m", 2, "echo x");
    let out = c.acmctl(&["--output", "machine", "submit", "--config", &cfg, "--follow"]);
    assert_eq!(code(&out), 0);
    let records: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records[0]["job_id"], "job-1");
    assert_eq!(records.last().unwrap()["state"], "Succeeded");
    assert!(records.iter().any(|r| r["kind"] == "transition"));
    assert!(records.iter().any(|r| r["data"] == "x\n"));

    for args in [&["list"][..], &["status", "job-1"], &["cluster"], &["logs", "job-1"]] {
        let mut full = vec!["--output=machine"];
        full.extend_from_slice(args);
        let out = c.acmctl(&full);
        assert_eq!(code(&out), 0, "{args:?}");
        for line in stdout(&out).lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap_or_else(|e| panic!("{args:?}: {line}: {e}"));
        }
    }
    let out = c.acmctl(&["--output=machine", "cluster"]);
    let node: serde_json::Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(node["kind"], "node");
    assert_eq!(node["instance_type"], "local");
}

fn write_tree(root: &Path, files: &[(&str, &str)]) {
    for (rel, body) in files {
        let p = root.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, body).unwrap();
    }
}

/// Digest of the fixture tree below, frozen from a first run.
const FIXTURE_DIGEST: &str = "bc21155eeab34c8f7ae42fff0f65f84df73f170cc3221a5d53c45cfb093f5484";

#[test]
fn same_directory_content_gives_the_same_code_digest() {
    let c = Cluster::local();
    let files = [
        ("train.py", "print('train')\n"),
        ("lib/util.py", "X = 1\n"),
        ("run.sh", "python train.py\n"),
    ];
    let a = c.path("tree-a");
    let b = c.path("tree-b");
    write_tree(&a, &files);
    std::thread::sleep(std::time::Duration::from_millis(1100));
    let mut reversed = files;
    reversed.reverse();
    write_tree(&b, &reversed);

    let cfg = config(&c, "code", 1, "cat train.py");
    let digest = |dir: &Path| {
        let out = c.acmctl(&[
            "--output=machine",
            "submit",
            "--config",
            &cfg,
            "--tar",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let rec: serde_json::Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
        rec["code_digest"].as_str().unwrap().to_string()
    };
    let da = digest(&a);
    assert_eq!(da, digest(&b));
    assert_eq!(da, FIXTURE_DIGEST);

    let out = c.acmctl(&["submit", "--config", &cfg, "--tar", a.to_str().unwrap(), "--follow"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("print('train')"));
}
