//! Hand-assembled byte vectors for the container layout.

use emvq::tokenstream::{pack_container, parse_container, Container, ContainerHeader, RoiBox, RoiEncoding, RoiRecord};

fn le32(v: u32) -> [u8; 4] {
    v.to_le_bytes()
}

#[test]
fn dense_sixteen_code_container() {
    let header = ContainerHeader::for_frame(9, 6, 2, 16, 8, false, [0xab; 32]).unwrap();
    let c = Container::new(header, vec![1, 2, 3, 4, 5, 15]).unwrap();

    let mut want = b"EMVQ".to_vec();
    want.extend([1, 0, 2]);
    want.extend([16, 0, 8, 0]);
    for v in [9, 6, 3, 2] {
        want.extend(le32(v));
    }
    want.extend([0xab; 32]);
    want.extend(le32(6));
    want.extend([0x12, 0x34, 0x5f]);
    want.extend([0, 0]);

    let got = pack_container(&c).unwrap();
    assert_eq!(got, want);
    assert_eq!(got.len(), 63 + 3 + 2);
    assert_eq!(parse_container(&want).unwrap(), c);
}

#[test]
fn checkerboard_three_bit_container_with_roi() {
    let mut header = ContainerHeader::for_frame(9, 6, 2, 5, 4, true, [0x01; 32]).unwrap();
    header.two_level_hint = true;
    // Cells (0,0), (1,1) and (2,0) survive on a 3x2 grid.
    let mut c = Container::new(header, vec![4, 1, 3]).unwrap();
    c.push_rois(vec![RoiRecord {
        roi: RoiBox { x: 1, y: 2, height: 1, width: 2 },
        encoding: RoiEncoding::Raw8,
        payload: vec![7, 200],
    }])
    .unwrap();

    let mut want = b"EMVQ".to_vec();
    want.extend([1, 0b111, 2]);
    want.extend([5, 0, 4, 0]);
    for v in [9, 6, 3, 2] {
        want.extend(le32(v));
    }
    want.extend([0x01; 32]);
    want.extend(le32(3));
    // 100 001 011, MSB first, zero padded.
    want.extend([0b1000_0101, 0b1000_0000]);
    want.extend([1, 0]);
    for v in [1, 2, 1, 2] {
        want.extend(le32(v));
    }
    want.push(0);
    want.extend(le32(2));
    want.extend([7, 200]);

    let got = pack_container(&c).unwrap();
    assert_eq!(got, want);
    assert_eq!(got.len(), 63 + 2 + 2 + 21 + 2);
    assert_eq!(parse_container(&want).unwrap(), c);
}
