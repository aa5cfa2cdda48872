mod common;

use common::{random_dataset, random_episode, rng, spec, tabular_dataset};
use dds_core::dataset::OfflineDataset;
use dds_core::datastore::{
    decode_dataset, decode_relabeled, encode_dataset, encode_relabeled, read_csv, read_dataset, write_csv, write_dataset, Header,
};
use proptest::prelude::*;
use serde::{Deserialize, Serialize};

fn split(bytes: &[u8]) -> (Header, Vec<u8>) {
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
    (header, bytes[16 + n..].to_vec())
}

/// Re-assembles a container around an edited header with valid checksums.
fn assemble(header: &Header, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).unwrap();
    let mut out = b"DDS1".to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

fn base() -> Vec<u8> {
    encode_dataset(&random_dataset(1, 3, 6, 2, 1)).unwrap()
}

#[test]
fn reassembling_an_untouched_header_still_decodes() {
    let (h, p) = split(&base());
    assert!(decode_dataset(&assemble(&h, &p)).is_ok());
}

#[test]
fn overlapping_arrays_are_rejected() {
    let (mut h, p) = split(&base());
    h.arrays[1].offset = h.arrays[0].offset;
    let err = decode_dataset(&assemble(&h, &p)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("overlap"), "{err}");
}

#[test]
fn arrays_past_the_payload_are_rejected() {
    let (mut h, p) = split(&base());
    let last = h.arrays.len() - 1;
    h.arrays[last].offset = p.len() as u64;
    assert!(decode_dataset(&assemble(&h, &p)).is_err());
    let (mut h, p) = split(&base());
    h.arrays[0].offset = u64::MAX - 2;
    assert!(decode_dataset(&assemble(&h, &p)).is_err());
}

#[test]
fn shape_and_byte_count_must_agree() {
    let (mut h, p) = split(&base());
    h.arrays[0].nbytes += 4;
    assert!(decode_dataset(&assemble(&h, &p)).is_err());
    let (mut h, p) = split(&base());
    h.arrays[0].shape = vec![usize::MAX, usize::MAX];
    assert!(decode_dataset(&assemble(&h, &p)).is_err());
}

#[test]
fn huge_header_length_is_rejected_without_allocating() {
    let mut b = base();
    b[4..12].copy_from_slice(&u64::MAX.to_le_bytes());
    assert_eq!(decode_dataset(&b).unwrap_err().exit_code(), 3);
    b[4..12].copy_from_slice(&(1u64 << 40).to_le_bytes());
    assert!(decode_dataset(&b).is_err());
}

#[test]
fn bad_magic_and_payload_corruption_are_rejected() {
    let mut b = base();
    b[0] = b'X';
    assert!(decode_dataset(&b).unwrap_err().to_string().contains("magic"));
    let mut b = base();
    let last = b.len() - 1;
    b[last] ^= 1;
    assert!(decode_dataset(&b).is_err());
}

#[test]
fn non_boolean_terminal_bytes_are_rejected() {
    let (h, mut p) = split(&base());
    let term = h.arrays.iter().find(|a| a.name.ends_with("terminals")).unwrap();
    p[term.offset as usize] = 7;
    let mut h2 = h.clone();
    h2.payload_crc32 = crc32fast::hash(&p);
    assert!(decode_dataset(&assemble(&h2, &p)).is_err());
}

#[test]
fn file_roundtrip_through_disk() {
    let d = random_dataset(2, 4, 9, 3, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.dds");
    write_dataset(&path, &d).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), d);
    assert_eq!(std::fs::read(&path).unwrap(), encode_dataset(&d).unwrap());
    assert_eq!(read_dataset(&dir.path().join("missing.dds")).unwrap_err().exit_code(), 3);
}

#[test]
fn relabeled_roundtrip_and_kind_check() {
    let rows: Vec<_> = (0..5).map(|i| (vec![i as f64 * 0.5, -1.0], i % 3, 0.25 * i as f64 + 1e-9, vec![0.0, i as f64], i == 4)).collect();
    let data = tabular_dataset(2, 3, 0.97, &rows);
    let bytes = encode_relabeled(&data).unwrap();
    assert_eq!(decode_relabeled(&bytes).unwrap(), data);
    assert!(decode_dataset(&bytes).is_err());
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Row {
    step: usize,
    loss: f64,
    phase: String,
}

#[test]
fn csv_roundtrip() {
    let rows = vec![Row { step: 1, loss: 0.5, phase: "q".into() }, Row { step: 2, loss: f64::NAN, phase: "awr".into() }];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("step,loss,phase\n"));
    let back: Vec<Row> = read_csv(&path).unwrap();
    assert_eq!(back[0], rows[0]);
    assert!(back[1].loss.is_nan());
}

fn arb_dataset() -> impl Strategy<Value = OfflineDataset> {
    (1usize..5, 1usize..4, 1usize..3, any::<u64>(), prop::collection::vec(1usize..20, 1..6)).prop_map(|(_, ds, da, seed, lens)| {
        let mut r = rng(seed);
        let episodes = lens.iter().enumerate().map(|(i, &len)| random_episode(&mut r, len, ds, da, i % 2 == 1)).collect();
        OfflineDataset { env: spec(ds, da), episodes, creation_seed: seed }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_raw_roundtrip_is_bit_exact(d in arb_dataset()) {
        let bytes = encode_dataset(&d).unwrap();
        let (back, header) = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(header.episode_count, d.episodes.len());
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }
}
