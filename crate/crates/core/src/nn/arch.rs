use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolution kernel width, fixed for every layer.
pub const KERNEL: usize = 3;

/// One `conv(k=3, pad=1) -> PReLU -> maxpool` block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub pool: usize,
}

/// Layer plan of the estimator.
///
/// Input is `input_channels x input_len` (real and imaginary parts of the
/// FID samples). The conv blocks are followed by a flatten, one hidden FC
/// layer with PReLU and a linear output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureSpec {
    pub input_len: usize,
    pub input_channels: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub hidden: usize,
    pub outputs: usize,
}

/// Which half of the network a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Conv,
    Fc,
}

/// Placement of one named tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub part: Part,
}

impl Default for ArchitectureSpec {
    /// 16/32/64 channels, pool 2 each (512 -> 64), 4096 -> 256 -> 4.
    fn default() -> Self {
        ArchitectureSpec {
            input_len: 512,
            input_channels: 2,
            blocks: vec![
                ConvBlockSpec { channels: 16, pool: 2 },
                ConvBlockSpec { channels: 32, pool: 2 },
                ConvBlockSpec { channels: 64, pool: 2 },
            ],
            hidden: 256,
            outputs: 4,
        }
    }
}

impl ArchitectureSpec {
    /// Small network used for gradient checks.
    pub fn tiny(input_len: usize, channels: usize, blocks: usize, hidden: usize) -> Self {
        ArchitectureSpec {
            input_len,
            input_channels: 2,
            blocks: (0..blocks).map(|_| ConvBlockSpec { channels, pool: 2 }).collect(),
            hidden,
            outputs: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 2 {
            return Err(Error::invalid("input must have 2 channels (real, imaginary)"));
        }
        if self.blocks.is_empty() || self.hidden == 0 || self.outputs == 0 {
            return Err(Error::invalid(
                "architecture needs at least one conv block, a hidden layer and outputs",
            ));
        }
        let mut len = self.input_len;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.pool == 0 {
                return Err(Error::invalid(format!("block {i}: zero channels or pool")));
            }
            if len == 0 || len % b.pool != 0 {
                return Err(Error::invalid(format!(
                    "block {i}: length {len} not divisible by pool {}",
                    b.pool
                )));
            }
            len /= b.pool;
        }
        Ok(())
    }

    /// Sequence length entering each block, then the final pooled length.
    pub fn lengths(&self) -> Vec<usize> {
        let mut out = vec![self.input_len];
        for b in &self.blocks {
            out.push(out.last().unwrap() / b.pool);
        }
        out
    }

    pub fn in_channels(&self, block: usize) -> usize {
        if block == 0 {
            self.input_channels
        } else {
            self.blocks[block - 1].channels
        }
    }

    pub fn flatten_len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels) * self.lengths().last().unwrap()
    }

    /// Tensor layout in serialisation order: per block `conv{i}.weight`
    /// `[out, in, 3]`, `conv{i}.bias`, `prelu{i}.slope`; then `fc1.weight`
    /// `[hidden, flatten]`, `fc1.bias`, `fc1.slope`, `fc2.weight`
    /// `[outputs, hidden]`, `fc2.bias`. The conv part precedes the FC part.
    pub fn layout(&self) -> Vec<TensorSlot> {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, part: Part| {
            let len = shape.iter().product();
            slots.push(TensorSlot {
                name,
                shape,
                offset,
                len,
                part,
            });
            offset += len;
        };
        for (i, b) in self.blocks.iter().enumerate() {
            let cin = self.in_channels(i);
            push(format!("conv{i}.weight"), vec![b.channels, cin, KERNEL], Part::Conv);
            push(format!("conv{i}.bias"), vec![b.channels], Part::Conv);
            push(format!("prelu{i}.slope"), vec![b.channels], Part::Conv);
        }
        let f = self.flatten_len();
        push("fc1.weight".into(), vec![self.hidden, f], Part::Fc);
        push("fc1.bias".into(), vec![self.hidden], Part::Fc);
        push("fc1.slope".into(), vec![self.hidden], Part::Fc);
        push("fc2.weight".into(), vec![self.outputs, self.hidden], Part::Fc);
        push("fc2.bias".into(), vec![self.outputs], Part::Fc);
        slots
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|s| s.len).sum()
    }

    /// Offset of the first FC tensor; everything before it is conv part.
    pub fn fc_offset(&self) -> usize {
        self.layout()
            .iter()
            .find(|s| s.part == Part::Fc)
            .map(|s| s.offset)
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let a = ArchitectureSpec::default();
        a.validate().unwrap();
        assert_eq!(a.lengths(), vec![512, 256, 128, 64]);
        assert_eq!(a.flatten_len(), 4096);
    }

    #[test]
    fn partition_is_exact() {
        let a = ArchitectureSpec::default();
        let slots = a.layout();
        let mut next = 0;
        for s in &slots {
            assert_eq!(s.offset, next);
            next += s.len;
        }
        assert_eq!(next, a.param_count());
        let fc = a.fc_offset();
        assert!(slots.iter().all(|s| (s.offset < fc) == (s.part == Part::Conv)));
    }

    #[test]
    fn rejects_indivisible_pool() {
        let mut a = ArchitectureSpec::tiny(64, 4, 2, 8);
        a.blocks[1].pool = 3;
        assert!(a.validate().is_err());
        a.input_channels = 1;
        assert!(a.validate().is_err());
    }
}
