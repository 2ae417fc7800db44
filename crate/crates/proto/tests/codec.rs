use ados_proto::frame::{Frame, FrameError, Opcode, HEADER_LEN};
use ados_proto::message::{decode_response, encode_response, ErrorCode, Payload, Request, Response, WireError};
use proptest::prelude::*;

fn bytes() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..64)
}

fn request() -> impl Strategy<Value = Request> {
    prop_oneof![
        "[a-z]{0,12}".prop_map(|name| Request::OpenPool { name }),
        ("[a-z]{0,12}", any::<u64>()).prop_map(|(name, size)| Request::CreatePool { name, size }),
        "[a-z]{0,12}".prop_map(|name| Request::DeletePool { name }),
        any::<u64>().prop_map(|pool| Request::ClosePool { pool }),
        (any::<u64>(), bytes(), bytes()).prop_map(|(pool, key, value)| Request::Put { pool, key, value }),
        (any::<u64>(), bytes()).prop_map(|(pool, key)| Request::Get { pool, key }),
        (any::<u64>(), bytes()).prop_map(|(pool, key)| Request::Erase { pool, key }),
        (any::<u64>(), bytes(), any::<u64>()).prop_map(|(pool, key, new_size)| Request::Resize { pool, key, new_size }),
        (any::<u64>(), bytes(), bytes(), any::<u64>())
            .prop_map(|(pool, key, request, value_size)| Request::InvokeAdo { pool, key, request, value_size }),
        (any::<u64>(), bytes(), bytes(), bytes())
            .prop_map(|(pool, key, value, request)| Request::InvokePutAdo { pool, key, value, request }),
    ]
}

fn response() -> impl Strategy<Value = Response> {
    prop_oneof![
        Just(Ok(Payload::Empty)),
        any::<u64>().prop_map(|h| Ok(Payload::Handle(h))),
        bytes().prop_map(|v| Ok(Payload::Value(v))),
        prop::collection::vec(bytes(), 0..4).prop_map(|b| Ok(Payload::Buffers(b))),
        (1u16..=16, any::<i64>(), "[ -~]{0,20}")
            .prop_map(|(c, d, m)| Err(WireError::new(ErrorCode::from_u16(c).unwrap(), d, m))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn requests_round_trip(req in request(), flags in any::<u16>(), rid in any::<u64>()) {
        let f = Frame::new(req.opcode(), flags, rid, req.encode_body());
        let wire = f.encode();
        let (back, used) = Frame::decode(&wire).unwrap().unwrap();
        prop_assert_eq!(used, wire.len());
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(Request::decode(back.opcode, &back.body).unwrap(), req);
    }

    #[test]
    fn responses_round_trip(resp in response()) {
        prop_assert_eq!(decode_response(&encode_response(&resp)).unwrap(), resp);
    }

    #[test]
    fn arbitrary_bytes_never_panic(buf in prop::collection::vec(any::<u8>(), 0..64)) {
        match Frame::decode(&buf) {
            Ok(Some((f, used))) => {
                prop_assert!(used >= HEADER_LEN && used <= buf.len());
                let _ = Request::decode(f.opcode, &f.body);
                let _ = decode_response(&f.body);
            }
            Ok(None) => prop_assert!(buf.len() < HEADER_LEN || u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize + 4 > buf.len()),
            Err(FrameError::Length(_)) | Err(FrameError::Version { .. }) | Err(FrameError::Opcode { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn truncated_bodies_are_rejected(req in request()) {
        let body = req.encode_body();
        for cut in 0..body.len() {
            prop_assert!(Request::decode(req.opcode(), &body[..cut]).is_err());
        }
        let mut longer = body.clone();
        longer.push(0);
        prop_assert!(Request::decode(req.opcode(), &longer).is_err());
    }
}

#[test]
fn every_opcode_has_a_distinct_wire_value() {
    let mut seen = std::collections::HashSet::new();
    for op in Opcode::ALL {
        assert!(seen.insert(op as u8));
        assert_eq!(Opcode::from_u8(op as u8), Some(op));
    }
}
