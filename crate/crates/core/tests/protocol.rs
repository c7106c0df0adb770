use proptest::prelude::*;
use qrm_edge::domain::{ModeId, ReconfigCommand, TelemetrySample};
use qrm_edge::protocol::{decode, encode, Ack, Bye, Framer, Hello, ProtocolError, WireMessage, MAX_FRAME_BYTES};

fn text(min: usize, max: usize) -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            proptest::char::range('a', 'z'),
            Just('"'),
            Just('\\'),
            Just(' '),
            Just('é'),
            Just('中'),
            Just('🙂'),
        ],
        min..=max,
    )
    .prop_map(|v| v.into_iter().collect())
}

fn grid(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    ((lo * 1e6) as i64..=(hi * 1e6) as i64).prop_map(|n| n as f64 / 1e6)
}

fn arb_message() -> impl Strategy<Value = WireMessage> {
    let hello = (text(1, 64), grid(0.001, 1000.0), any::<u8>(), proptest::collection::vec(text(1, 12), 1..=18))
        .prop_map(|(node_id, capacity_wh, m, class_labels)| {
            WireMessage::Hello(Hello {
                node_id,
                capacity_wh,
                initial_mode: ModeId(m),
                class_labels,
            })
        });
    let telemetry = (
        text(1, 64),
        any::<u32>(),
        any::<u8>(),
        (grid(0.0, 1000.0), grid(0.0, 1000.0), grid(-100.0, 200.0), grid(0.0, 100_000.0)),
        grid(0.0, 100.0),
        text(0, 64),
        grid(0.0, 1.0),
    )
        .prop_map(|(node_id, ts, m, (gpu, dev, temp, fps), pct, label, confidence)| {
            WireMessage::Telemetry(TelemetrySample {
                node_id,
                timestamp_ms: ts as u64,
                mode: ModeId(m),
                gpu_power_w: gpu,
                device_power_w: dev,
                temperature_c: temp,
                fps,
                battery_pct: pct,
                label,
                confidence,
            })
        });
    let reconfig = (any::<u64>(), text(1, 64), any::<u8>(), any::<u64>()).prop_map(|(id, node_id, m, at)| {
        WireMessage::Reconfig(ReconfigCommand {
            command_id: id,
            node_id,
            target_mode: ModeId(m),
            issued_at_ms: at,
        })
    });
    let ack = (any::<u64>(), text(1, 64)).prop_map(|(command_id, node_id)| WireMessage::Ack(Ack { command_id, node_id }));
    let bye = (text(1, 64), text(0, 64)).prop_map(|(node_id, reason)| WireMessage::Bye(Bye { node_id, reason }));
    prop_oneof![hello, telemetry, reconfig, ack, bye]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn encode_decode_round_trip(msg in arb_message()) {
        match encode(&msg) {
            Ok(frame) => {
                prop_assert!(frame.len() <= MAX_FRAME_BYTES);
                prop_assert_eq!(frame.last(), Some(&b'\n'));
                prop_assert_eq!(decode(&frame).unwrap(), msg);
            }
            // only hellos carry enough text to overflow a frame
            Err(ProtocolError::TooLong(_)) => prop_assert_eq!(msg.type_name(), "hello"),
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn framer_is_chunking_invariant(msgs in proptest::collection::vec(arb_message(), 1..8), cut in any::<prop::sample::Index>()) {
        let frames: Vec<Vec<u8>> = msgs.iter().filter_map(|m| encode(m).ok()).collect();
        let stream: Vec<u8> = frames.concat();
        let split = if stream.is_empty() { 0 } else { cut.index(stream.len()) };
        let mut framer = Framer::new();
        let mut got = framer.push(&stream[..split]);
        got.extend(framer.push(&stream[split..]));
        prop_assert!(framer.finish().is_none());
        let decoded: Vec<WireMessage> = got.into_iter().map(Result::unwrap).collect();
        let expected: Vec<WireMessage> = frames.iter().map(|f| decode(f).unwrap()).collect();
        prop_assert_eq!(decoded, expected);
    }

    #[test]
    fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
        let mut framer = Framer::new();
        let _ = framer.push(&bytes);
        let _ = framer.finish();
        let _ = decode(&bytes);
    }
}

#[test]
fn image_payloads_are_refused() {
    let frame = b"{\"type\":\"telemetry\",\"node_id\":\"n\",\"timestamp_ms\":1,\"mode\":0,\"gpu_power_w\":1.0,\"device_power_w\":2.0,\"temperature_c\":30.0,\"fps\":25.0,\"battery_pct\":50.0,\"label\":\"\",\"confidence\":0.0,\"image\":\"iVBORw0KGgo=\"}\n";
    match decode(frame) {
        Err(ProtocolError::UnknownField { field, .. }) => assert_eq!(field, "image"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn fields_in_any_order_are_accepted() {
    let frame = b"{\"node_id\":\"n\",\"command_id\":4,\"type\":\"ack\"}\n";
    assert_eq!(
        decode(frame).unwrap(),
        WireMessage::Ack(Ack {
            command_id: 4,
            node_id: "n".into()
        })
    );
}

#[test]
fn canonical_frames_still_get_range_checks() {
    let frame = b"{\"type\":\"telemetry\",\"node_id\":\"n\",\"timestamp_ms\":1,\"mode\":0,\"gpu_power_w\":1.0,\"device_power_w\":2.0,\"temperature_c\":30.0,\"fps\":25.0,\"battery_pct\":150.0,\"label\":\"\",\"confidence\":0.0}\n";
    assert!(matches!(decode(frame), Err(ProtocolError::OutOfRange { field: "battery_pct", .. })));
    let frame = b"{\"type\":\"bye\",\"node_id\":\"\",\"reason\":\"x\"}\n";
    assert!(matches!(decode(frame), Err(ProtocolError::OutOfRange { field: "node_id", .. })));
}

#[test]
fn duplicate_or_missing_fields() {
    let missing = b"{\"type\":\"ack\",\"node_id\":\"n\"}\n";
    assert!(matches!(decode(missing), Err(ProtocolError::MissingField { .. })));
    let wrong_type = b"{\"type\":\"ack\",\"node_id\":\"n\",\"command_id\":\"4\"}\n";
    assert!(matches!(decode(wrong_type), Err(ProtocolError::Malformed(_))));
}
