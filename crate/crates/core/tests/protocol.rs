//! The wire protocol against a served toy model: in process over TCP, and
//! through the `pet serve` binary over TCP and stdio.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};

use pet_core::backend::external::{Endpoint, ExternalBackend};
use pet_core::backend::protocol::serve;
use pet_core::backend::toy::ToyMlm;
use pet_core::backend::{ClozeExample, MlmBackend, MlmExample, ParamSnapshot, SoftExample};
use pet_core::pvp::MaskedSequence;
use pet_core::run::read_metrics;
use pet_core::vocab::{Tokenizer, Vocabulary};

fn toy() -> ToyMlm {
    let vocab = Vocabulary::build(["the food was great bad fine awful tasty cold"], []);
    ToyMlm::random(vocab, 8, 4, 3).unwrap()
}

/// Serves one connection of `model` on an ephemeral port.
fn spawn_server(mut model: ToyMlm) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        serve(&mut model, reader, stream).unwrap();
    });
    addr
}

#[test]
fn remote_model_matches_local_model_bit_for_bit() {
    let mut local = toy();
    let addr = spawn_server(local.clone());
    let mut remote = ExternalBackend::connect(&Endpoint::Tcp(addr)).unwrap();
    assert_eq!(remote.capabilities(), local.capabilities());
    assert_eq!(remote.vocabulary().unwrap().tokens(), local.vocab().tokens());

    let vocab = local.vocab().clone();
    let enc = |t: &str| vocab.encode(t).unwrap();
    let mut tokens = enc("the food was great");
    tokens[3] = vocab.mask_id();
    let seq = MaskedSequence {
        tokens: tokens.clone(),
        mask_position: 3,
        segment_ids: vec![0; 4],
    };
    let cands = enc("great bad fine");
    assert_eq!(remote.score_candidates(&seq, &cands).unwrap(), local.score_candidates(&seq, &cands).unwrap());

    let labeled = vec![ClozeExample {
        seq: seq.clone(),
        label_tokens: vec![vec![cands[0]], vec![cands[1], cands[2]]],
        target: 1,
    }];
    let mut mlm_tokens = enc("the food was cold");
    let mlm = vec![MlmExample {
        targets: vec![(1, mlm_tokens[1])],
        tokens: {
            mlm_tokens[1] = vocab.mask_id();
            mlm_tokens
        },
    }];
    let before = remote.snapshot().unwrap();
    for _ in 0..3 {
        let a = remote.train_step_combined(&labeled, &mlm, 0.25, 0.1).unwrap();
        let b = local.train_step_combined(&labeled, &mlm, 0.25, 0.1).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(remote.score_candidates(&seq, &cands).unwrap(), local.score_candidates(&seq, &cands).unwrap());

    remote.init_head(2).unwrap();
    local.init_head(2).unwrap();
    let batch = vec![SoftExample {
        tokens: enc("food was tasty"),
        q: vec![0.3, 0.7],
    }];
    assert_eq!(remote.train_step_soft(&batch, 0.5).unwrap(), local.train_step_soft(&batch, 0.5).unwrap());
    assert_eq!(remote.classify(&batch[0].tokens).unwrap(), local.classify(&batch[0].tokens).unwrap());

    // restoring the remote snapshot undoes the training
    remote.restore(&before).unwrap();
    let fresh = toy();
    assert_eq!(remote.score_candidates(&seq, &cands).unwrap(), fresh.score_candidates(&seq, &cands).unwrap());
    assert!(remote.restore(&ParamSnapshot::Remote { id: "nope".into() }).is_err());
}

#[test]
fn malformed_requests_get_errors_and_the_connection_survives() {
    let addr = spawn_server(toy());
    let stream = TcpStream::connect(addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    let mut ask = |line: &str| -> serde_json::Value {
        writeln!(writer, "{line}").unwrap();
        let mut reply = String::new();
        reader.read_line(&mut reply).unwrap();
        serde_json::from_str(&reply).unwrap()
    };
    let cases = [
        ("not json", "bad_request"),
        (r#"{"v":1,"op":"dance"}"#, "bad_request"),
        (r#"{"v":7,"op":"capabilities"}"#, "unsupported_version"),
        (r#"{"v":1,"op":"score","tokens":[1],"mask_pos":4,"candidates":[1]}"#, "bad_request"),
        (r#"{"v":1,"op":"score","tokens":[9999,0],"mask_pos":1,"candidates":[1]}"#, "unknown_token"),
        (r#"{"v":1,"op":"classify","tokens":[3]}"#, "head_not_initialized"),
    ];
    for (request, code) in cases {
        let r = ask(request);
        assert_eq!(r["ok"], false, "{request}");
        assert_eq!(r["error"], code, "{request}: {r}");
        assert_eq!(r["v"], 1);
    }
    let r = ask(r#"{"v":1,"op":"capabilities"}"#);
    assert_eq!(r["ok"], true);
    assert_eq!(r["result"]["protocol_version"], 1);
    assert_eq!(r["result"]["score_convention"], "logits");
}

// ------------------------------------------------------------ the binary

const PET: &str = env!("CARGO_BIN_EXE_pet");

fn repo(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).display().to_string()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        "repetitions = 1\n[toy]\npretrain_steps = 50\n[train]\nsteps = 30\nmax_seq_length = 64\n[classifier]\nsteps = 100\nmax_seq_length = 64\n",
    )
    .unwrap();
    path.display().to_string()
}

fn pet(args: &[&str]) -> std::process::Output {
    let out = Command::new(PET).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn pet_through_a_served_model_matches_the_local_toy_backend() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f).display().to_string();
    pet(&["synth", "--out", &d("data"), "--n-train", "8", "--n-unlabeled", "60", "--n-test", "40", "--seed", "2"]);
    let config = write_config(dir.path());
    let task = repo("configs/tasks/sentiment_lite.toml");
    let (train, unl, test) = (d("data/train.jsonl"), d("data/unlabeled.jsonl"), d("data/test.jsonl"));
    let common = |out: &str, backend: &str| -> Vec<String> {
        [
            "pet", "--task", &task, "--config", &config, "--train", &train, "--unlabeled", &unl, "--test", &test,
            "--out", out, "--backend", backend, "--jobs", "1",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let run = |args: Vec<String>| pet(&args.iter().map(String::as_str).collect::<Vec<_>>());

    run(common(&d("local"), "toy"));
    let local = read_metrics(&dir.path().join("local")).unwrap();

    // TCP
    let mut child = Command::new(PET)
        .args(["serve", "--task", &task, "--config", &config, "--train", &train, "--unlabeled", &unl, "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let _server = Server(child);
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    run(common(&d("tcp"), &format!("external:tcp://{addr}")));
    assert_eq!(read_metrics(&dir.path().join("tcp")).unwrap().rows, local.rows);

    // a child process per model over stdio
    let cmd = format!("external:cmd:{PET} serve --task {task} --config {config} --train {train} --unlabeled {unl}");
    run(common(&d("stdio"), &cmd));
    assert_eq!(read_metrics(&dir.path().join("stdio")).unwrap().rows, local.rows);
}
