// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Little-endian `f64` matrix files: an 8-byte header holding the row count
//! and column count as `u32` LE, followed by `rows * cols` values row-major.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_matrix<W: Write>(mut out: W, cols: usize, rows: &[&[f64]]) -> Result<()> {
    let (n, d) = header_fields(rows.len(), cols)?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&d.to_le_bytes())?;
    for row in rows {
        if row.len() != cols {
            return Err(Error::Shape {
                expected: cols,
                found: row.len(),
            });
        }
        for v in *row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Returns `(cols, values)`; `values.len() == rows * cols`.
pub fn read_matrix<R: Read>(mut input: R) -> Result<(usize, Vec<f64>)> {
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut values = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        input.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok((cols, values))
}

fn header_fields(rows: usize, cols: usize) -> Result<(u32, u32)> {
    let conv = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Argument(format!("matrix extent {v} exceeds u32")))
    };
    Ok((conv(rows)?, conv(cols)?))
}
