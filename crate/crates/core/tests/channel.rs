use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semcom::channel::{
    budget_for_rate, pack, read_packets, unpack, write_packets, ChannelModel, Packet,
};
use semcom::masker::{ClsAttentionGrid, SelectionMask};
use semcom::patch::TokenMatrix;
use semcom::tensor::Tensor;
use semcom::Error;

fn tokens(d: usize, p: usize, seed: u64) -> TokenMatrix {
    let mut t = Tensor::randn(&[d, p + 1], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    t.round_to_f32();
    TokenMatrix::new(t).unwrap()
}

#[test]
fn golden_bytes() {
    let mask = SelectionMask::from_indices(3, 3, &[0, 8]).unwrap();
    let z = TokenMatrix::new(
        Tensor::new(&[2, 10], {
            let mut v = vec![9.0; 20];
            // column 1 is patch 0, column 9 is patch 8
            v[1] = 1.0;
            v[10 + 1] = -2.0;
            v[9] = 0.5;
            v[10 + 9] = 3.0;
            v
        })
        .unwrap(),
    )
    .unwrap();
    let pkt = pack(&z, &mask, 0x0102_0304).unwrap();
    let want: Vec<u8> = vec![
        0x04, 0x03, 0x02, 0x01, // id
        0x09, 0x00, // P
        0x02, 0x00, // D
        0x02, 0x00, // n_selected
        0x01, 0x01, // bitmap
        0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0, // patch 0
        0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x40, 0x40, // patch 8
    ];
    assert_eq!(pkt.to_bytes(), want);
    assert_eq!(pkt.encoded_len(), want.len());
    assert_eq!(pkt.payload_bits(), 80 + 2 * 2 * 32);
}

#[test]
fn budget_values() {
    assert_eq!(budget_for_rate(1.0, 16).unwrap(), 16);
    assert_eq!(budget_for_rate(0.75, 16).unwrap(), 12);
    assert_eq!(budget_for_rate(0.5, 16).unwrap(), 8);
    assert_eq!(budget_for_rate(0.25, 16).unwrap(), 4);
    assert_eq!(budget_for_rate(0.3, 16).unwrap(), 4);
    assert_eq!(budget_for_rate(0.5, 2400).unwrap(), 1200);
    for bad in [0.0, -0.5, 1.01, f64::NAN] {
        assert!(matches!(budget_for_rate(bad, 16), Err(Error::Argument(_))));
    }
}

#[test]
fn schedule_is_indexed_by_step() {
    let ch = ChannelModel::schedule(vec![1.0, 0.5]).unwrap();
    assert_eq!(ch.rate_at(0).unwrap(), 1.0);
    assert_eq!(ch.rate_at(1).unwrap(), 0.5);
    assert!(ch.rate_at(2).is_err());
    assert!(ChannelModel::schedule(vec![]).is_err());
    assert!(ChannelModel::fixed(0.0).is_err());
}

#[test]
fn transmit_respects_rate() {
    let z = tokens(4, 16, 1);
    let g =
        ClsAttentionGrid::new(Tensor::new(&[4, 4], (0..16).map(|i| i as f64).collect()).unwrap())
            .unwrap();
    let ch = ChannelModel::schedule(vec![0.25, 0.75]).unwrap();
    let (p0, s0) = ch.transmit(0, &z, &g, 1.0, 3, 10).unwrap();
    let (p1, _) = ch.transmit(1, &z, &g, 1.0, 3, 11).unwrap();
    assert_eq!(p0.n_selected(), 4);
    assert_eq!(p1.n_selected(), 12);
    assert_eq!(s0.mask.selected(), vec![12, 13, 14, 15]);
}

#[test]
fn unpack_needs_matching_grid() {
    let z = tokens(3, 6, 2);
    let pkt = pack(&z, &SelectionMask::full(2, 3), 0).unwrap();
    assert!(unpack(&pkt, 3, 3).is_err());
    assert!(unpack(&pkt, 3, 2).is_ok());
    assert!(pack(&z, &SelectionMask::full(2, 2), 0).is_err());
}

#[test]
fn packet_stream_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pkts.bin");
    let pkts: Vec<Packet> = (0..5)
        .map(|i| {
            let m =
                SelectionMask::from_indices(4, 4, &(0..i as usize).collect::<Vec<_>>()).unwrap();
            pack(&tokens(8, 16, i), &m, i as u32).unwrap()
        })
        .collect();
    write_packets(&path, &pkts).unwrap();
    assert_eq!(read_packets(&path).unwrap(), pkts);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_packets(&path).is_err());
}

proptest! {
    #[test]
    fn pack_unpack_scatters_selected_columns(
        rows in 1usize..6,
        cols in 1usize..6,
        d in 1usize..12,
        bits in prop::collection::vec(any::<bool>(), 36),
        seed in any::<u64>(),
    ) {
        let p = rows * cols;
        let mask = SelectionMask::from_flat(rows, cols, bits[..p].to_vec()).unwrap();
        let z = tokens(d, p, seed);
        let pkt = pack(&z, &mask, 7).unwrap();
        prop_assert_eq!(pkt.payload_bits(), 80 + 32 * mask.n_selected() * d);
        let back = Packet::from_bytes(&pkt.to_bytes()).unwrap();
        let (z_hat, m) = unpack(&back, rows, cols).unwrap();
        prop_assert_eq!(&m, &mask);
        prop_assert_eq!(z_hat.shape(), &[d, p]);
        for i in 0..p {
            for r in 0..d {
                let want = if mask.flat()[i] { z.tensor().at(&[r, i + 1]) } else { 0.0 };
                prop_assert_eq!(z_hat.at(&[r, i]), want);
            }
        }
    }

    #[test]
    fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        match Packet::from_bytes(&bytes) {
            Ok(p) => prop_assert_eq!(p.to_bytes(), bytes),
            Err(e) => prop_assert!(matches!(e, Error::CorruptPacket(_))),
        }
    }
}
