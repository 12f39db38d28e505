use crate::error::ParseError;

/// Little-endian reader that tracks its byte offset for error reporting.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ParseError> {
        if self.remaining() < n {
            return Err(ParseError::Truncated {
                offset: self.offset(),
                needed: (n - self.remaining()) as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), ParseError> {
        let offset = self.offset();
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(ParseError::BadMagic {
                offset,
                expected,
                found,
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, ParseError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, ParseError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(self) -> std::result::Result<(), ParseError> {
        if self.remaining() > 0 {
            return Err(ParseError::TrailingBytes {
                offset: self.offset(),
                extra: self.remaining() as u64,
            });
        }
        Ok(())
    }
}
