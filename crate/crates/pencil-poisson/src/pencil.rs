//! Pencil-to-pencil transposition of distributed fields.
//!
//! A transpose rearranges a field between adjacent orientations (Z - Y or
//! Y - X). All index arithmetic happens once, in [`plan_transpose`]: the plan
//! records, per peer, the global sub-box this rank must send or receive, and
//! owns byte buffers sized to the largest message. Executing a plan packs,
//! exchanges and unpacks using only those buffers, so repeated executions
//! allocate nothing on the worker's side.
//!
//! Packing order inside a message is lexicographic in the *target's* local
//! index (the receiver's storage order), so the receiver unpacks a message as
//! an in-order walk of its own sub-box. A plan's inverse shares its buffers;
//! executing a plan and then its inverse restores the source field bitwise.

use crate::comm::Communicator;
use crate::grid::{Axis, LocalBox, Orientation, PencilLayout};
use crate::{Error, Result};
use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;

/// Element kind of a distributed field, in units of `f64` lanes.
/// Complex values are stored interleaved `(re, im)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    Real,
    Complex,
}

impl ElemKind {
    #[inline]
    pub fn lanes(self) -> usize {
        match self {
            ElemKind::Real => 1,
            ElemKind::Complex => 2,
        }
    }
}

/// One rank's block of a global field, stored in the orientation's
/// storage order with the locally complete axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedField {
    pub layout: PencilLayout,
    pub rank: usize,
    pub elem: ElemKind,
    pub data: Vec<f64>,
}

impl DistributedField {
    pub fn zeros(layout: PencilLayout, rank: usize, elem: ElemKind) -> Result<Self> {
        let len = layout.local_box(rank)?.len() * elem.lanes();
        Ok(DistributedField { layout, rank, elem, data: vec![0.0; len] })
    }

    /// Fill a real field by evaluating `f` at every owned global point.
    /// The same closure yields the same global field on any process grid.
    pub fn from_global_fn(
        layout: PencilLayout,
        rank: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut field = DistributedField::zeros(layout, rank, ElemKind::Real)?;
        let bbox = field.local_box();
        let order = layout.orientation.storage_order();
        let mut i = 0;
        for a in bbox.range(order[0]) {
            for b in bbox.range(order[1]) {
                for c in bbox.range(order[2]) {
                    let mut g = [0usize; 3];
                    g[order[0].idx()] = a;
                    g[order[1].idx()] = b;
                    g[order[2].idx()] = c;
                    field.data[i] = f(g[0], g[1], g[2]);
                    i += 1;
                }
            }
        }
        Ok(field)
    }

    #[inline]
    pub fn local_box(&self) -> LocalBox {
        // Layout construction already validated every rank.
        self.layout.local_box(self.rank).expect("validated layout")
    }

    /// Flat element index (not lane index) of a global coordinate this rank owns.
    pub fn flat_index(&self, x: usize, y: usize, z: usize) -> usize {
        let bbox = self.local_box();
        let strides = bbox.strides(self.layout.orientation.storage_order());
        let g = [x, y, z];
        let mut idx = 0;
        for axis in Axis::ALL {
            let i = axis.idx();
            debug_assert!(bbox.range(axis).contains(&g[i]));
            idx += (g[i] - bbox.start[i]) * strides[i];
        }
        idx
    }
}

/// One planned message: the global sub-box exchanged with `peer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedMessage {
    pub peer: usize,
    pub tag: u32,
    pub bbox: LocalBox,
    pub elems: usize,
    pub bytes: usize,
}

#[derive(Debug, Default)]
struct PlanBuffers {
    send: Vec<u8>,
    recv: Vec<u8>,
}

/// A reusable transposition between two layouts, bound to one rank.
#[derive(Debug)]
pub struct TransposePlan {
    from: PencilLayout,
    to: PencilLayout,
    rank: usize,
    elem: ElemKind,
    sends: Vec<PlannedMessage>,
    recvs: Vec<PlannedMessage>,
    self_copy: Option<PlannedMessage>,
    buffers: Rc<RefCell<PlanBuffers>>,
    buffer_bytes: usize,
}

fn tag_for(from: Orientation, to: Orientation) -> u32 {
    match (from, to) {
        (Orientation::Z, Orientation::Y) => 0x10,
        (Orientation::Y, Orientation::Z) => 0x11,
        (Orientation::Y, Orientation::X) => 0x12,
        (Orientation::X, Orientation::Y) => 0x13,
        _ => unreachable!("non-adjacent orientations are rejected at plan time"),
    }
}

fn intersect(a: &LocalBox, b: &LocalBox) -> Option<LocalBox> {
    let mut start = [0usize; 3];
    let mut count = [0usize; 3];
    for i in 0..3 {
        let lo = a.start[i].max(b.start[i]);
        let hi = (a.start[i] + a.count[i]).min(b.start[i] + b.count[i]);
        if lo >= hi {
            return None;
        }
        start[i] = lo;
        count[i] = hi - lo;
    }
    Some(LocalBox { start, count })
}

/// Compute the full exchange schedule for one rank's transpose between
/// adjacent orientations. Peers follow from box intersections alone, so the
/// row/column peer structure is a consequence, not an assumption.
pub fn plan_transpose(
    from: &PencilLayout,
    to: &PencilLayout,
    elem: ElemKind,
    rank: usize,
) -> Result<TransposePlan> {
    if from.grid != to.grid || from.pgrid != to.pgrid {
        return Err(Error::InvalidArgument(
            "transpose endpoints must share grid and process grid".into(),
        ));
    }
    if !from.orientation.is_adjacent(to.orientation) {
        return Err(Error::NonAdjacentOrientations(from.orientation, to.orientation));
    }
    let nranks = from.pgrid.nranks();
    if rank >= nranks {
        return Err(Error::InvalidArgument(format!("rank {rank} outside 0..{nranks}")));
    }
    let tag = tag_for(from.orientation, to.orientation);
    let my_from = from.local_box(rank)?;
    let my_to = to.local_box(rank)?;
    let lanes = elem.lanes();
    let message = |peer: usize, bbox: LocalBox| {
        let elems = bbox.len();
        PlannedMessage { peer, tag, bbox, elems, bytes: elems * lanes * 8 }
    };

    let mut sends = Vec::new();
    let mut recvs = Vec::new();
    let mut self_copy = None;
    for peer in 0..nranks {
        if peer == rank {
            self_copy = intersect(&my_from, &my_to).map(|b| message(rank, b));
            continue;
        }
        if let Some(b) = intersect(&my_from, &to.local_box(peer)?) {
            sends.push(message(peer, b));
        }
        if let Some(b) = intersect(&my_to, &from.local_box(peer)?) {
            recvs.push(message(peer, b));
        }
    }

    // Both buffers cover the largest message in either direction so an
    // inverse plan can share them.
    let max_bytes = sends
        .iter()
        .chain(recvs.iter())
        .chain(self_copy.iter())
        .map(|m| m.bytes)
        .max()
        .unwrap_or(0);
    let buffers = Rc::new(RefCell::new(PlanBuffers {
        send: vec![0u8; max_bytes],
        recv: vec![0u8; max_bytes],
    }));

    Ok(TransposePlan {
        from: *from,
        to: *to,
        rank,
        elem,
        sends,
        recvs,
        self_copy,
        buffers,
        buffer_bytes: 2 * max_bytes,
    })
}

impl TransposePlan {
    pub fn from_layout(&self) -> &PencilLayout {
        &self.from
    }

    pub fn to_layout(&self) -> &PencilLayout {
        &self.to
    }

    pub fn send_messages(&self) -> &[PlannedMessage] {
        &self.sends
    }

    pub fn recv_messages(&self) -> &[PlannedMessage] {
        &self.recvs
    }

    pub fn self_copy(&self) -> Option<&PlannedMessage> {
        self.self_copy.as_ref()
    }

    /// Total reusable buffer bytes owned by this plan (shared with its
    /// inverse). Recorded at plan time; executions never grow it.
    pub fn buffer_bytes(&self) -> usize {
        self.buffer_bytes
    }

    /// Bytes this rank puts on the transport per execution (self copies stay
    /// local and are excluded).
    pub fn network_bytes_per_execution(&self) -> u64 {
        self.sends.iter().map(|m| m.bytes as u64).sum()
    }

    /// The inverse rearrangement. Shares this plan's buffers, so the pair
    /// costs one buffer set.
    pub fn invert(&self) -> TransposePlan {
        let tag = tag_for(self.to.orientation, self.from.orientation);
        let retag = |m: &PlannedMessage| PlannedMessage { tag, ..*m };
        TransposePlan {
            from: self.to,
            to: self.from,
            rank: self.rank,
            elem: self.elem,
            sends: self.recvs.iter().map(retag).collect(),
            recvs: self.sends.iter().map(retag).collect(),
            self_copy: self.self_copy.as_ref().map(retag),
            buffers: Rc::clone(&self.buffers),
            buffer_bytes: self.buffer_bytes,
        }
    }

    /// Human-readable schedule: per peer, the global ranges and byte counts.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "transpose {:?} -> {:?}, rank {}, buffers {} B",
            self.from.orientation, self.to.orientation, self.rank, self.buffer_bytes
        );
        let fmt_box = |b: &LocalBox| {
            format!(
                "x {}..{}, y {}..{}, z {}..{}",
                b.start[0],
                b.start[0] + b.count[0],
                b.start[1],
                b.start[1] + b.count[1],
                b.start[2],
                b.start[2] + b.count[2]
            )
        };
        if let Some(m) = &self.self_copy {
            let _ = writeln!(out, "  self: {} ({} B)", fmt_box(&m.bbox), m.bytes);
        }
        for m in &self.sends {
            let _ = writeln!(out, "  send -> {}: {} ({} B)", m.peer, fmt_box(&m.bbox), m.bytes);
        }
        for m in &self.recvs {
            let _ = writeln!(out, "  recv <- {}: {} ({} B)", m.peer, fmt_box(&m.bbox), m.bytes);
        }
        out
    }

    fn check_field(&self, field: &DistributedField, layout: &PencilLayout, side: &'static str) -> Result<()> {
        if field.layout != *layout || field.elem != self.elem || field.rank != self.rank {
            return Err(Error::LayoutMismatch { side });
        }
        Ok(())
    }

    /// Pack `bbox` from `src` into `buf`, iterating the box in the target
    /// orientation's storage order.
    fn pack(&self, src: &DistributedField, bbox: &LocalBox, buf: &mut [u8]) {
        let order = self.to.orientation.storage_order();
        let sbox = src.local_box();
        let strides = sbox.strides(self.from.orientation.storage_order());
        let lanes = self.elem.lanes();
        let (s0, t0) = (sbox.start[order[0].idx()], strides[order[0].idx()]);
        let (s1, t1) = (sbox.start[order[1].idx()], strides[order[1].idx()]);
        let (s2, t2) = (sbox.start[order[2].idx()], strides[order[2].idx()]);
        let mut off = 0;
        for a in bbox.range(order[0]) {
            let ia = (a - s0) * t0;
            for b in bbox.range(order[1]) {
                let iab = ia + (b - s1) * t1;
                for c in bbox.range(order[2]) {
                    let base = (iab + (c - s2) * t2) * lanes;
                    for lane in 0..lanes {
                        buf[off..off + 8].copy_from_slice(&src.data[base + lane].to_le_bytes());
                        off += 8;
                    }
                }
            }
        }
        debug_assert_eq!(off, bbox.len() * lanes * 8);
    }

    /// Inverse of [`Self::pack`]: the buffer walks `bbox` in the target
    /// storage order, which is `dst`'s own order.
    fn unpack(&self, dst: &mut DistributedField, bbox: &LocalBox, buf: &[u8]) {
        let order = self.to.orientation.storage_order();
        let dbox = dst.local_box();
        let strides = dbox.strides(self.to.orientation.storage_order());
        let lanes = self.elem.lanes();
        let (s0, t0) = (dbox.start[order[0].idx()], strides[order[0].idx()]);
        let (s1, t1) = (dbox.start[order[1].idx()], strides[order[1].idx()]);
        let (s2, t2) = (dbox.start[order[2].idx()], strides[order[2].idx()]);
        let mut off = 0;
        for a in bbox.range(order[0]) {
            let ia = (a - s0) * t0;
            for b in bbox.range(order[1]) {
                let iab = ia + (b - s1) * t1;
                for c in bbox.range(order[2]) {
                    let base = (iab + (c - s2) * t2) * lanes;
                    for lane in 0..lanes {
                        let mut raw = [0u8; 8];
                        raw.copy_from_slice(&buf[off..off + 8]);
                        dst.data[base + lane] = f64::from_le_bytes(raw);
                        off += 8;
                    }
                }
            }
        }
        debug_assert_eq!(off, bbox.len() * lanes * 8);
    }

    /// Execute into a preallocated destination field. Sends are packed one
    /// at a time through the shared send buffer (the transport copies
    /// eagerly), then receives drain in rank order.
    pub fn execute_into(
        &self,
        src: &DistributedField,
        dst: &mut DistributedField,
        comm: &Communicator,
    ) -> Result<()> {
        self.check_field(src, &self.from, "source")?;
        self.check_field(dst, &self.to, "destination")?;
        let mut bufs = self.buffers.borrow_mut();
        let PlanBuffers { send, recv } = &mut *bufs;
        for m in &self.sends {
            self.pack(src, &m.bbox, &mut send[..m.bytes]);
            comm.send_bytes(m.peer, m.tag, &send[..m.bytes])?;
        }
        if let Some(m) = &self.self_copy {
            self.pack(src, &m.bbox, &mut send[..m.bytes]);
            self.unpack(dst, &m.bbox, &send[..m.bytes]);
        }
        for m in &self.recvs {
            comm.recv_bytes_into(m.peer, m.tag, &mut recv[..m.bytes])?;
            self.unpack(dst, &m.bbox, &recv[..m.bytes]);
        }
        Ok(())
    }

    /// Convenience form that allocates the destination once per call; hot
    /// paths should hold a destination and use [`Self::execute_into`].
    pub fn execute(&self, src: &DistributedField, comm: &Communicator) -> Result<DistributedField> {
        let mut dst = DistributedField::zeros(self.to, self.rank, self.elem)?;
        self.execute_into(src, &mut dst, comm)?;
        Ok(dst)
    }
}
