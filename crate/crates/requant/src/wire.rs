//! Little-endian primitives shared by the binary formats.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use requant_core::{ComputationSpec, Error, LossKind, Nonlinearity, Result};

pub(crate) const VERSION: u32 = 1;

pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.u32(VERSION);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.0.write_u16::<LE>(v).expect("write to Vec");
    }

    pub fn u32(&mut self, v: u32) {
        self.0.write_u32::<LE>(v).expect("write to Vec");
    }

    pub fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).expect("write to Vec");
    }

    pub fn f32(&mut self, v: f32) {
        self.0.write_f32::<LE>(v).expect("write to Vec");
    }

    pub fn f64(&mut self, v: f64) {
        self.0.write_f64::<LE>(v).expect("write to Vec");
    }

    pub fn len_u32(&mut self, n: usize, what: &str) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    pub fn name(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| Error::Format(format!("name '{s}' is too long")))?;
        self.u16(n);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }

    pub fn spec(&mut self, spec: &ComputationSpec) -> Result<()> {
        let widths = spec.widths();
        self.len_u32(widths.len(), "dimension count")?;
        for d in widths {
            self.len_u32(d, "dimension")?;
        }
        self.u8(spec.nonlinearity.code());
        self.u8(spec.loss.code());
        Ok(())
    }
}

pub(crate) struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    what: &'static str,
}

fn truncated(what: &str) -> Error {
    Error::Format(format!("{what}: unexpected end of data"))
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        let mut r = Reader {
            cur: Cursor::new(data),
            what,
        };
        let mut m = [0u8; 4];
        r.cur.read_exact(&mut m).map_err(|_| truncated(what))?;
        if &m != magic {
            return Err(Error::Format(format!("{what}: bad magic {m:?}")));
        }
        let v = r.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("{what}: unsupported version {v}")));
        }
        Ok(r)
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| truncated(self.what))
    }

    pub fn u16(&mut self) -> Result<u16> {
        self.cur.read_u16::<LE>().map_err(|_| truncated(self.what))
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LE>().map_err(|_| truncated(self.what))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(|_| truncated(self.what))
    }

    pub fn f32(&mut self) -> Result<f32> {
        self.cur.read_f32::<LE>().map_err(|_| truncated(self.what))
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LE>().map_err(|_| truncated(self.what))
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("{}: invalid flag byte {b}", self.what))),
        }
    }

    /// Checks there are at least `n` more bytes before allocating for them.
    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        if self.remaining() < n {
            return Err(truncated(self.what));
        }
        let mut v = vec![0u8; n];
        self.cur.read_exact(&mut v).map_err(|_| truncated(self.what))?;
        Ok(v)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        if self.remaining() / 4 < n {
            return Err(truncated(self.what));
        }
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let b = self.bytes(n)?;
        String::from_utf8(b).map_err(|_| Error::Format(format!("{}: layer name is not UTF-8", self.what)))
    }

    pub fn spec(&mut self) -> Result<ComputationSpec> {
        let n = self.usize()?;
        if n < 3 || n > self.remaining() / 4 {
            return Err(Error::Format(format!("{}: bad dimension count {n}", self.what)));
        }
        let dims: Vec<usize> = (0..n).map(|_| self.usize()).collect::<Result<_>>()?;
        let nonlinearity = Nonlinearity::from_code(self.u8()?)?;
        let loss = LossKind::from_code(self.u8()?)?;
        let spec = ComputationSpec {
            d_in: dims[0],
            hidden: dims[1..n - 1].to_vec(),
            classes: dims[n - 1],
            nonlinearity,
            loss,
            bias: true,
        };
        spec.validate()
            .map_err(|e| Error::Format(format!("{}: {e}", self.what)))?;
        Ok(spec)
    }

    pub fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    pub fn finish(self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(Error::Format(format!("{}: {n} trailing bytes", self.what))),
        }
    }
}
