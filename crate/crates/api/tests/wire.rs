use layerdiff_api::*;
use serde_json::json;

#[test]
fn requests_survive_a_json_round_trip() {
    let req = IterateRequest {
        ckpt: "/runs/a/model.ckpt".into(),
        source: SourceRef {
            dir: "/data".into(),
            record: Some("000003".into()),
        },
        additions: vec![
            AdditionSpec {
                prompt: "a yellow star".into(),
                prior: Some("/p.png".into()),
                global: None,
            },
            AdditionSpec {
                prompt: "a blue square".into(),
                prior: None,
                global: Some("a scene".into()),
            },
        ],
        guidance: Guidance {
            steps: Some(20),
            smg_scale: Some(0.0),
            ..Default::default()
        },
        out: "/out".into(),
        lenient: true,
    };
    let text = serde_json::to_string(&req).unwrap();
    let back: IterateRequest = serde_json::from_str(&text).unwrap();
    assert_eq!(back, req);
}

#[test]
fn unknown_fields_are_rejected() {
    let bad = json!({"ckpt": "m", "source": {"dir": "d"}, "style": "s", "strenght": 0.5});
    assert!(serde_json::from_value::<StyleRequest>(bad).is_err());
    let bad = json!({"out": "d", "count": 3});
    assert!(serde_json::from_value::<MakeDataRequest>(bad).is_err());
}

#[test]
fn error_kinds_are_lowercase() {
    let v = serde_json::to_value(ErrorKind::Runtime).unwrap();
    assert_eq!(v, json!("runtime"));
}
