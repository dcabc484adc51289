use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use unlearn_forge::eval::{CompletionPrompt, EvalError, HttpJudge, Judge, JudgeVerdict};

/// Serves `responses.len()` requests, one canned body each, and returns the
/// request bodies it received.
fn mock_judge(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            assert!(request_line.starts_with("POST /judge "), "{request_line}");
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h == "\r\n" || h.is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(String::from_utf8(buf).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        bodies
    });
    (url, handle)
}

fn prompt() -> CompletionPrompt {
    CompletionPrompt {
        prompt: "Zor studies at".into(),
        references: vec!["Zor".into()],
        subtlety: 2,
    }
}

#[test]
fn posts_prompt_and_completion_and_parses_the_verdict() {
    let (url, server) = mock_judge(vec![(
        200,
        r#"{"category":3,"evidence":["Vyilm Keep"]}"#.into(),
    )]);
    let judge = HttpJudge::new(&url, Duration::from_secs(5));
    let v = judge.judge(&prompt(), " Vyilm Keep.").unwrap();
    assert_eq!(
        v,
        JudgeVerdict {
            category: 3,
            evidence: vec!["Vyilm Keep".into()]
        }
    );
    let bodies = server.join().unwrap();
    let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(sent["prompt"], "Zor studies at");
    assert_eq!(sent["completion"], " Vyilm Keep.");
    assert_eq!(sent["references"][0], "Zor");
}

#[test]
fn invalid_verdicts_and_http_errors_are_unavailable() {
    let (url, server) = mock_judge(vec![
        (200, r#"{"category":3,"evidence":[]}"#.into()),
        (200, r#"{"category":7,"evidence":["x"]}"#.into()),
        (500, r#"{"error":"boom"}"#.into()),
        (200, "not json".into()),
    ]);
    let judge = HttpJudge::new(&url, Duration::from_secs(5));
    for _ in 0..4 {
        assert!(matches!(
            judge.judge(&prompt(), "x"),
            Err(EvalError::JudgeUnavailable(_))
        ));
    }
    server.join().unwrap();
}

#[test]
fn unreachable_judge_is_unavailable() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let judge = HttpJudge::new(&format!("http://127.0.0.1:{port}/"), Duration::from_secs(2));
    assert!(matches!(
        judge.judge(&prompt(), "x"),
        Err(EvalError::JudgeUnavailable(_))
    ));
}
