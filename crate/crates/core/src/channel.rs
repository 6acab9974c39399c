//! Rate budgets, the packet wire format and the lossless rate-schedule
//! channel.
//!
//! Wire layout, little-endian:
//!
//! ```text
//! id u32 | P u16 | D u16 | n_selected u16 | bitmap ceil(P/8) bytes | n_selected * D f32
//! ```
//!
//! Payload column `k` holds the token of the `k`-th selected patch in
//! ascending index order. The CLS token is never sent.

use std::fs;
use std::path::Path;

use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::masker::{build_mask, ClsAttentionGrid, MaskSelection, SelectionMask};
use crate::patch::TokenMatrix;
use crate::tensor::{write_atomic, Tensor};

/// Fixed header size in bytes.
pub const HEADER_BYTES: usize = 10;

/// Patch budget for rate `r`: `floor(r * P)`, and exactly `P` at `r = 1`.
pub fn budget_for_rate(rate: f64, num_patches: usize) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::arg(format!("rate {rate} outside (0, 1]")));
    }
    if rate == 1.0 {
        return Ok(num_patches);
    }
    Ok(((rate * num_patches as f64).floor() as usize).min(num_patches))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Packet {
    image_id: u32,
    num_patches: u16,
    embed_dim: u16,
    n_selected: u16,
    bitmap: Vec<u8>,
    payload: Vec<f32>,
}

impl Packet {
    /// Checks the bitmap/payload invariants.
    pub fn from_parts(
        image_id: u32,
        num_patches: u16,
        embed_dim: u16,
        n_selected: u16,
        bitmap: Vec<u8>,
        payload: Vec<f32>,
    ) -> Result<Self> {
        let p = num_patches as usize;
        if bitmap.len() != p.div_ceil(8) {
            return Err(Error::CorruptPacket(format!(
                "bitmap of {} bytes for {p} patches",
                bitmap.len()
            )));
        }
        let ones: u32 = bitmap.iter().map(|b| b.count_ones()).sum();
        if ones != n_selected as u32 {
            return Err(Error::CorruptPacket(format!(
                "header claims {n_selected} patches, bitmap marks {ones}"
            )));
        }
        if (p..bitmap.len() * 8).any(|i| bitmap[i / 8] >> (i % 8) & 1 == 1) {
            return Err(Error::CorruptPacket("bitmap padding bits are set".into()));
        }
        let want = n_selected as usize * embed_dim as usize;
        if payload.len() != want {
            return Err(Error::CorruptPacket(format!(
                "payload holds {} values, header needs {want}",
                payload.len()
            )));
        }
        Ok(Self {
            image_id,
            num_patches,
            embed_dim,
            n_selected,
            bitmap,
            payload,
        })
    }

    pub fn image_id(&self) -> u32 {
        self.image_id
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches as usize
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim as usize
    }

    pub fn n_selected(&self) -> usize {
        self.n_selected as usize
    }

    pub fn bitmap(&self) -> &[u8] {
        &self.bitmap
    }

    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    /// Header plus token bits. The positional bitmap is not counted.
    pub fn payload_bits(&self) -> usize {
        HEADER_BYTES * 8 + self.payload.len() * 32
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.bitmap.len() + self.payload.len() * 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_into(&mut out);
        out
    }

    fn write_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.image_id.to_le_bytes());
        out.extend_from_slice(&self.num_patches.to_le_bytes());
        out.extend_from_slice(&self.embed_dim.to_le_bytes());
        out.extend_from_slice(&self.n_selected.to_le_bytes());
        out.extend_from_slice(&self.bitmap);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Parses exactly one packet; any leftover byte is an error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let packet = Self::read(&mut r)?;
        if r.remaining() != 0 {
            return Err(Error::CorruptPacket(format!(
                "{} bytes after payload",
                r.remaining()
            )));
        }
        Ok(packet)
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let short = || Error::CorruptPacket("packet truncated".into());
        let image_id = r.u32().ok_or_else(short)?;
        let num_patches = r.u16().ok_or_else(short)?;
        let embed_dim = r.u16().ok_or_else(short)?;
        let n_selected = r.u16().ok_or_else(short)?;
        let bitmap = r
            .take((num_patches as usize).div_ceil(8))
            .ok_or_else(short)?
            .to_vec();
        let n = n_selected as usize * embed_dim as usize;
        let payload = r
            .take(n * 4)
            .ok_or_else(short)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_parts(
            image_id,
            num_patches,
            embed_dim,
            n_selected,
            bitmap,
            payload,
        )
    }
}

/// Selected patch columns of `z`, ascending, CLS column excluded.
pub fn pack(z: &TokenMatrix, mask: &SelectionMask, image_id: u32) -> Result<Packet> {
    let p = z.num_patches();
    if mask.num_patches() != p {
        return Err(Error::arg(format!(
            "mask covers {} patches, tokens have {p}",
            mask.num_patches()
        )));
    }
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::arg(format!("{what} {v} does not fit the header")))
    };
    let d = z.embed_dim();
    let tokens = z.tensor().data();
    let selected = mask.selected();
    let mut payload = Vec::with_capacity(selected.len() * d);
    for &i in &selected {
        payload.extend((0..d).map(|row| tokens[row * (p + 1) + i + 1] as f32));
    }
    Packet::from_parts(
        image_id,
        narrow(p, "patch count")?,
        narrow(d, "embedding width")?,
        narrow(selected.len(), "selection size")?,
        mask.to_bitmap(),
        payload,
    )
}

/// Scatters the payload into a zero `(D, P)` matrix.
pub fn unpack(packet: &Packet, rows: usize, cols: usize) -> Result<(Tensor, SelectionMask)> {
    let p = packet.num_patches();
    if rows * cols != p {
        return Err(Error::arg(format!(
            "packet has {p} patches, receiver grid is {rows}x{cols}"
        )));
    }
    let mask = SelectionMask::from_bitmap(rows, cols, &packet.bitmap)?;
    if mask.n_selected() != packet.n_selected() {
        return Err(Error::CorruptPacket("bitmap and header disagree".into()));
    }
    let d = packet.embed_dim();
    let mut z = vec![0.0; d * p];
    for (k, i) in mask.selected().into_iter().enumerate() {
        for row in 0..d {
            z[row * p + i] = packet.payload[k * d + row] as f64;
        }
    }
    Ok((Tensor::new(&[d, p], z)?, mask))
}

/// `(D, P)` patch tokens with the CLS column dropped, as a receiver sees
/// them when every patch arrives.
pub fn full_patch_tokens(z: &TokenMatrix) -> Tensor {
    let mut t = z.patch_tokens();
    t.round_to_f32();
    t
}

/// Per-image compression rate, either fixed or following a schedule.
#[derive(Clone, Debug, PartialEq)]
pub enum ChannelModel {
    Fixed(f64),
    Schedule(Vec<f64>),
}

impl ChannelModel {
    pub fn fixed(rate: f64) -> Result<Self> {
        budget_for_rate(rate, 1)?;
        Ok(Self::Fixed(rate))
    }

    pub fn schedule(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::arg("rate schedule is empty"));
        }
        for &r in &rates {
            budget_for_rate(r, 1)?;
        }
        Ok(Self::Schedule(rates))
    }

    pub fn rate_at(&self, step: usize) -> Result<f64> {
        match self {
            Self::Fixed(r) => Ok(*r),
            Self::Schedule(rates) => rates.get(step).copied().ok_or_else(|| {
                Error::arg(format!(
                    "schedule has {} entries, step {step} requested",
                    rates.len()
                ))
            }),
        }
    }

    /// Budget, mask and pack for transmission step `step`. The channel is
    /// lossless, so the returned packet is what the receiver gets.
    pub fn transmit(
        &self,
        step: usize,
        z: &TokenMatrix,
        grid: &ClsAttentionGrid,
        alpha: f64,
        seed: u64,
        image_id: u32,
    ) -> Result<(Packet, MaskSelection)> {
        let budget = budget_for_rate(self.rate_at(step)?, grid.num_patches())?;
        let selection = build_mask(grid, budget, alpha, seed)?;
        let packet = pack(z, &selection.mask, image_id)?;
        Ok((packet, selection))
    }
}

/// Writes packets back to back into one file.
pub fn write_packets(path: &Path, packets: &[Packet]) -> Result<()> {
    let mut out = Vec::new();
    for p in packets {
        p.write_into(&mut out);
    }
    write_atomic(path, &out)
}

/// Reads a file written by [`write_packets`].
pub fn read_packets(path: &Path) -> Result<Vec<Packet>> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    let mut out = Vec::new();
    while r.remaining() > 0 {
        out.push(Packet::read(&mut r)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(d: usize, p: usize) -> TokenMatrix {
        let data = (0..d * (p + 1)).map(|i| i as f64 * 0.5).collect();
        TokenMatrix::new(Tensor::new(&[d, p + 1], data).unwrap()).unwrap()
    }

    #[test]
    fn budgets() {
        assert_eq!(budget_for_rate(0.5, 16).unwrap(), 8);
        assert_eq!(budget_for_rate(1.0, 16).unwrap(), 16);
        assert_eq!(budget_for_rate(0.25, 2400).unwrap(), 600);
        assert_eq!(budget_for_rate(0.75, 16).unwrap(), 12);
        assert!(budget_for_rate(0.0, 16).is_err());
        assert!(budget_for_rate(1.01, 16).is_err());
        assert!(budget_for_rate(f64::NAN, 16).is_err());
    }

    #[test]
    fn pack_order_skips_cls() {
        let z = tokens(2, 16);
        let m = SelectionMask::from_indices(4, 4, &[5, 0]).unwrap();
        let pk = pack(&z, &m, 3).unwrap();
        // row stride is P + 1 = 17, patch i lives in column i + 1
        assert_eq!(pk.payload(), &[0.5, 9.0, 3.0, 11.5]);
        let (zh, back) = unpack(&pk, 4, 4).unwrap();
        assert_eq!(back, m);
        assert_eq!(zh.at(&[0, 0]), 0.5);
        assert_eq!(zh.at(&[1, 5]), 11.5);
        assert_eq!(zh.data().iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn full_and_empty_masks() {
        let z = tokens(3, 4);
        let full = pack(&z, &SelectionMask::full(2, 2), 0).unwrap();
        assert_eq!(full.payload().len(), 12);
        assert_eq!(unpack(&full, 2, 2).unwrap().0, full_patch_tokens(&z));
        let empty = pack(
            &z,
            &SelectionMask::from_flat(2, 2, vec![false; 4]).unwrap(),
            0,
        )
        .unwrap();
        assert_eq!(empty.n_selected(), 0);
        assert!(unpack(&empty, 2, 2)
            .unwrap()
            .0
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn header_layout() {
        let z = tokens(2, 9);
        let pk = pack(
            &z,
            &SelectionMask::from_indices(3, 3, &[8]).unwrap(),
            0x0102_0304,
        )
        .unwrap();
        let b = pk.to_bytes();
        assert_eq!(&b[..10], &[4, 3, 2, 1, 9, 0, 2, 0, 1, 0]);
        assert_eq!(&b[10..12], &[0, 1]);
        assert_eq!(b.len(), 12 + 8);
        assert_eq!(Packet::from_bytes(&b).unwrap(), pk);
        assert_eq!(pk.payload_bits(), 80 + 64);
    }

    #[test]
    fn short_payload_is_corrupt() {
        let z = tokens(2, 16);
        let pk = pack(
            &z,
            &SelectionMask::from_indices(4, 4, &[1, 2, 3]).unwrap(),
            0,
        )
        .unwrap();
        let mut b = pk.to_bytes();
        b.truncate(b.len() - 8);
        assert!(matches!(
            Packet::from_bytes(&b),
            Err(Error::CorruptPacket(_))
        ));
        let mut b = pk.to_bytes();
        b.push(0);
        assert!(matches!(
            Packet::from_bytes(&b),
            Err(Error::CorruptPacket(_))
        ));
    }

    #[test]
    fn schedule_steps() {
        let ch = ChannelModel::schedule(vec![0.5, 0.25]).unwrap();
        let z = tokens(2, 16);
        let g = ClsAttentionGrid::new(Tensor::full(&[4, 4], 1.0 / 17.0)).unwrap();
        assert_eq!(ch.transmit(0, &z, &g, 1.0, 0, 0).unwrap().0.n_selected(), 8);
        assert_eq!(ch.transmit(1, &z, &g, 1.0, 0, 0).unwrap().0.n_selected(), 4);
        assert!(ch.transmit(2, &z, &g, 1.0, 0, 0).is_err());
        assert!(ChannelModel::schedule(vec![0.5, 0.0]).is_err());
    }
}
