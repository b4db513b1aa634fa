use std::process::Command;

fn layerlens() -> Command {
    Command::new(env!("CARGO_BIN_EXE_layerlens"))
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out_arg = format!("--out={}", out.display());
    let status = layerlens().args(["run", "--k=0", &out_arg]).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = layerlens()
        .args(["run", "--endpoint=http://127.0.0.1:9", &out_arg])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    let status = layerlens()
        .args(["toygen", &out_arg])
        .env("LAYERLENS_THREADS", "zero")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0), "toygen does not start a pool");
    let status = layerlens()
        .args(["run", "--dump", &out.display().to_string()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2), "--key value without '=' is rejected");
    let run_out = format!("--out={}", tmp.path().join("r").display());
    let dump_arg = format!("--dump={}", out.display());
    let status = layerlens()
        .args(["run", &dump_arg, &run_out])
        .env("LAYERLENS_THREADS", "zero")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = layerlens()
        .args(["run", &dump_arg, &run_out, "--layers=3", "--ranks=8"])
        .env("LAYERLENS_THREADS", "1")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let shown = layerlens()
        .args(["inspect", &out.display().to_string()])
        .output()
        .unwrap();
    assert!(shown.status.success());
    assert!(String::from_utf8_lossy(&shown.stdout).contains("transitions [0, 1, 2, 3]"));
}
