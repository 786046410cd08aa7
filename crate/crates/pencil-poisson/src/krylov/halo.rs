//! Z-pencil field with one-cell ghost shells on the four horizontal sides.
//!
//! The 7-point stencil needs each cell's six neighbours. Horizontally those
//! can live on another rank, so the local block is padded by one plane on the
//! low/high x and y sides and filled by exchanging boundary planes with the
//! four process-grid neighbours (periodic wrap). The vertical axis is always
//! complete on every rank and closed with a Neumann reflection inside the
//! stencil itself, so z carries no padding. Corner ghosts are never read and
//! never exchanged.
//!
//! Swaps come in a blocking form and a split start/finish form. The split
//! form posts all sends up front and defers the receives, letting the caller
//! update cells that do not read ghosts in between. Reading a ghost between
//! `swap_start` and `swap_finish` is a bug; debug builds track an in-flight
//! flag and the returned ticket asserts on drop if never finished.

use crate::comm::Communicator;
use crate::grid::{Axis, Orientation, PencilLayout};
use crate::pencil::DistributedField;
use crate::{Error, Result};

/// Sender's low-x interior plane, bound for the receiver's high-x ghost.
const TAG_XLO_PLANE: u32 = 0x20;
/// Sender's high-x interior plane, bound for the receiver's low-x ghost.
const TAG_XHI_PLANE: u32 = 0x21;
const TAG_YLO_PLANE: u32 = 0x22;
const TAG_YHI_PLANE: u32 = 0x23;

/// Local block of a Z-pencil real field padded by one ghost plane on each
/// horizontal side.
pub struct HaloField {
    pub layout: PencilLayout,
    pub rank: usize,
    cx: usize,
    cy: usize,
    cz: usize,
    data: Vec<f64>,
    /// Byte scratch for packing one boundary plane at a time; allocated on
    /// the first swap that actually sends (never, on a single worker).
    scratch: Vec<u8>,
    in_flight: bool,
}

/// Ticket for a started halo swap; pass it back to
/// [`HaloField::swap_finish`].
#[must_use = "a started halo swap must be finished"]
pub struct PendingHalo {
    finished: bool,
}

impl Drop for PendingHalo {
    fn drop(&mut self) {
        debug_assert!(self.finished, "halo swap started but never finished");
    }
}

impl HaloField {
    pub fn new(layout: PencilLayout, rank: usize) -> Result<Self> {
        if layout.orientation != Orientation::Z {
            return Err(Error::InvalidArgument(
                "halo fields live in the Z pencil".into(),
            ));
        }
        let bbox = layout.local_box(rank)?;
        let [cx, cy, cz] = bbox.count;
        Ok(HaloField {
            layout,
            rank,
            cx,
            cy,
            cz,
            data: vec![0.0; (cx + 2) * (cy + 2) * cz],
            scratch: Vec::new(),
            in_flight: false,
        })
    }

    pub fn from_field(field: &DistributedField) -> Result<Self> {
        let mut halo = HaloField::new(field.layout, field.rank)?;
        halo.fill_interior_from(field)?;
        Ok(halo)
    }

    /// Interior extent along x, y, z.
    pub fn interior_counts(&self) -> [usize; 3] {
        [self.cx, self.cy, self.cz]
    }

    #[inline]
    fn stride_x(&self) -> usize {
        (self.cy + 2) * self.cz
    }

    /// Flat index of an interior cell; ghosts sit at x = -1, cx and
    /// y = -1, cy relative to these coordinates.
    #[inline]
    pub(crate) fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (x + 1) * self.stride_x() + (y + 1) * self.cz + z
    }

    /// Read an interior or ghost value; `x` and `y` may be -1 or the count.
    pub fn get(&self, x: i64, y: i64, z: usize) -> f64 {
        debug_assert!(!self.in_flight, "ghost read during an in-flight swap");
        let i = (x + 1) as usize * self.stride_x() + (y + 1) as usize * self.cz + z;
        self.data[i]
    }

    #[inline]
    pub(crate) fn values(&self) -> &[f64] {
        &self.data
    }

    fn check_source(&self, field: &DistributedField) -> Result<()> {
        if field.layout != self.layout
            || field.rank != self.rank
            || field.data.len() != self.cx * self.cy * self.cz
        {
            return Err(Error::LayoutMismatch { side: "halo interior" });
        }
        Ok(())
    }

    /// Copy a plain Z-pencil field into the interior; ghosts are untouched.
    pub fn fill_interior_from(&mut self, field: &DistributedField) -> Result<()> {
        self.check_source(field)?;
        let cz = self.cz;
        for x in 0..self.cx {
            for y in 0..self.cy {
                let src = (x * self.cy + y) * cz;
                let dst = self.idx(x, y, 0);
                self.data[dst..dst + cz].copy_from_slice(&field.data[src..src + cz]);
            }
        }
        Ok(())
    }

    /// Copy interior values from a plain slice in Z-pencil storage order.
    pub(crate) fn load_interior(&mut self, src: &[f64]) {
        debug_assert_eq!(src.len(), self.cx * self.cy * self.cz);
        let cz = self.cz;
        for x in 0..self.cx {
            for y in 0..self.cy {
                let s = (x * self.cy + y) * cz;
                let d = self.idx(x, y, 0);
                self.data[d..d + cz].copy_from_slice(&src[s..s + cz]);
            }
        }
    }

    /// Copy the interior back out to a plain Z-pencil field.
    pub fn copy_interior_to(&self, field: &mut DistributedField) -> Result<()> {
        self.check_source(field)?;
        let cz = self.cz;
        for x in 0..self.cx {
            for y in 0..self.cy {
                let dst = (x * self.cy + y) * cz;
                let src = self.idx(x, y, 0);
                field.data[dst..dst + cz].copy_from_slice(&self.data[src..src + cz]);
            }
        }
        Ok(())
    }

    /// Bytes held for communication: the ghost shell plus packing scratch.
    /// Interior storage is solution state, not a communication buffer.
    pub fn peak_buffer_bytes(&self) -> usize {
        let shell = self.data.len() - self.cx * self.cy * self.cz;
        shell * 8 + self.scratch.capacity()
    }

    fn ensure_scratch(&mut self) {
        let need = self.cx.max(self.cy) * self.cz * 8;
        if self.scratch.len() < need {
            self.scratch.resize(need, 0);
        }
    }

    /// Copy one x-plane (`cy * cz` values) into scratch as little-endian
    /// bytes and return the filled prefix.
    fn pack_x_plane(&mut self, x: usize) -> usize {
        let n = self.cy * self.cz;
        for y in 0..self.cy {
            let src = self.idx(x, y, 0);
            for z in 0..self.cz {
                let b = self.data[src + z].to_le_bytes();
                self.scratch[(y * self.cz + z) * 8..][..8].copy_from_slice(&b);
            }
        }
        n * 8
    }

    fn unpack_x_plane(&mut self, ghost_x: i64) {
        let row0 = (ghost_x + 1) as usize * self.stride_x() + self.cz;
        for y in 0..self.cy {
            for z in 0..self.cz {
                let o = (y * self.cz + z) * 8;
                let b: [u8; 8] = self.scratch[o..o + 8].try_into().unwrap();
                self.data[row0 + y * self.cz + z] = f64::from_le_bytes(b);
            }
        }
    }

    fn pack_y_plane(&mut self, y: usize) -> usize {
        let n = self.cx * self.cz;
        for x in 0..self.cx {
            let src = self.idx(x, y, 0);
            for z in 0..self.cz {
                let b = self.data[src + z].to_le_bytes();
                self.scratch[(x * self.cz + z) * 8..][..8].copy_from_slice(&b);
            }
        }
        n * 8
    }

    fn unpack_y_plane(&mut self, ghost_y: i64) {
        let sx = self.stride_x();
        let col0 = sx + (ghost_y + 1) as usize * self.cz;
        for x in 0..self.cx {
            for z in 0..self.cz {
                let o = (x * self.cz + z) * 8;
                let b: [u8; 8] = self.scratch[o..o + 8].try_into().unwrap();
                self.data[col0 + x * sx + z] = f64::from_le_bytes(b);
            }
        }
    }

    /// Periodic wrap without a peer: ghost planes copy from the opposite
    /// interior side of this same rank.
    fn wrap_x_local(&mut self) {
        let sx = self.stride_x();
        let row = (self.cy + 2) * self.cz;
        // ghost x = -1 <- interior x = cx - 1; ghost x = cx <- interior x = 0
        self.data.copy_within(self.cx * sx..self.cx * sx + row, 0);
        self.data
            .copy_within(sx..sx + row, (self.cx + 1) * sx);
    }

    fn wrap_y_local(&mut self) {
        let sx = self.stride_x();
        let cz = self.cz;
        for x in 0..self.cx {
            let base = (x + 1) * sx;
            self.data
                .copy_within(base + self.cy * cz..base + (self.cy + 1) * cz, base);
            self.data
                .copy_within(base + cz..base + 2 * cz, base + (self.cy + 1) * cz);
        }
    }

    /// Blocking halo exchange of the four horizontal ghost planes.
    pub fn swap_halos(&mut self, comm: &Communicator) -> Result<()> {
        let pending = self.swap_start(comm)?;
        self.swap_finish(pending, comm)
    }

    /// Post all boundary-plane sends and resolve local wraps; ghosts are not
    /// valid until [`Self::swap_finish`] returns.
    pub fn swap_start(&mut self, comm: &Communicator) -> Result<PendingHalo> {
        debug_assert!(!self.in_flight, "overlapping halo swaps on one field");
        let pgrid = self.layout.pgrid;
        if pgrid.px > 1 || pgrid.py > 1 {
            self.ensure_scratch();
        }
        if pgrid.px == 1 {
            self.wrap_x_local();
        } else {
            let lo = self.layout.neighbor_along(self.rank, Axis::X, -1);
            let hi = self.layout.neighbor_along(self.rank, Axis::X, 1);
            let n = self.pack_x_plane(0);
            comm.send_bytes(lo, TAG_XLO_PLANE, &self.scratch[..n])?;
            let n = self.pack_x_plane(self.cx - 1);
            comm.send_bytes(hi, TAG_XHI_PLANE, &self.scratch[..n])?;
        }
        if pgrid.py == 1 {
            self.wrap_y_local();
        } else {
            let lo = self.layout.neighbor_along(self.rank, Axis::Y, -1);
            let hi = self.layout.neighbor_along(self.rank, Axis::Y, 1);
            let n = self.pack_y_plane(0);
            comm.send_bytes(lo, TAG_YLO_PLANE, &self.scratch[..n])?;
            let n = self.pack_y_plane(self.cy - 1);
            comm.send_bytes(hi, TAG_YHI_PLANE, &self.scratch[..n])?;
        }
        self.in_flight = true;
        Ok(PendingHalo { finished: false })
    }

    /// Receive the four incoming planes and populate the ghosts.
    pub fn swap_finish(&mut self, mut pending: PendingHalo, comm: &Communicator) -> Result<()> {
        debug_assert!(self.in_flight, "swap_finish without swap_start");
        pending.finished = true;
        let pgrid = self.layout.pgrid;
        if pgrid.px > 1 {
            let lo = self.layout.neighbor_along(self.rank, Axis::X, -1);
            let hi = self.layout.neighbor_along(self.rank, Axis::X, 1);
            let n = self.cy * self.cz * 8;
            comm.recv_bytes_into(hi, TAG_XLO_PLANE, &mut self.scratch[..n])?;
            self.unpack_x_plane(self.cx as i64);
            comm.recv_bytes_into(lo, TAG_XHI_PLANE, &mut self.scratch[..n])?;
            self.unpack_x_plane(-1);
        }
        if pgrid.py > 1 {
            let lo = self.layout.neighbor_along(self.rank, Axis::Y, -1);
            let hi = self.layout.neighbor_along(self.rank, Axis::Y, 1);
            let n = self.cx * self.cz * 8;
            comm.recv_bytes_into(hi, TAG_YLO_PLANE, &mut self.scratch[..n])?;
            self.unpack_y_plane(self.cy as i64);
            comm.recv_bytes_into(lo, TAG_YHI_PLANE, &mut self.scratch[..n])?;
            self.unpack_y_plane(-1);
        }
        self.in_flight = false;
        Ok(())
    }
}
