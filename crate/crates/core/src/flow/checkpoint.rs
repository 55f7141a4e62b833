use std::path::Path;

use super::{Coupling, FlowModel, Logit, Mixing, Permutation, Stage};
use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::io::{Container, TensorRecord};

pub const FLOW_MAGIC: [u8; 4] = *b"NFCK";

fn join(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format(0, format!("flow manifest: {}", msg.into()))
}

fn fields(line: &str) -> Vec<(&str, &str)> {
    line.split(' ').filter_map(|kv| kv.split_once('=')).collect()
}

fn field<'a>(f: &[(&str, &'a str)], key: &str) -> Result<&'a str> {
    f.iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| bad(format!("missing field {key}")))
}

fn num<T: std::str::FromStr>(f: &[(&str, &str)], key: &str) -> Result<T> {
    field(f, key)?
        .parse()
        .map_err(|_| bad(format!("unparsable field {key}")))
}

fn list(f: &[(&str, &str)], key: &str) -> Result<Vec<usize>> {
    let s = field(f, key)?;
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.parse().map_err(|_| bad(format!("unparsable list {key}"))))
        .collect()
}

impl FlowModel {
    /// Manifest header lines describing the architecture.
    pub fn manifest(&self) -> Vec<String> {
        let mut lines = vec![format!("flow dim={}", self.dim)];
        if let Some([c, h, w]) = self.image {
            lines.push(format!("image c={c} h={h} w={w}"));
        }
        for stage in &self.stages {
            lines.push(match stage {
                Stage::Coupling(c) => format!(
                    "stage coupling width={} hidden={} alpha={} part1={} part2={}",
                    c.width,
                    c.hidden,
                    c.alpha,
                    join(&c.part1),
                    join(&c.part2)
                ),
                Stage::Permutation(p) => format!("stage permutation perm={}", join(&p.perm)),
                Stage::Squeeze { c, h, w, .. } => format!("stage squeeze c={c} h={h} w={w}"),
                Stage::Mixing(m) => format!("stage mixing channels={} spatial={}", m.channels, m.spatial),
                Stage::Logit(l) => format!("stage logit width={} shrink={}", l.width, l.shrink),
                Stage::Split { keep } => format!("stage split keep={keep}"),
            });
        }
        lines
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(FLOW_MAGIC);
        c.header = self.manifest();
        c.tensors = self
            .params
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                value: e.value.as_ref().clone(),
            })
            .collect();
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path, FLOW_MAGIC)?)
    }

    /// Rebuilds a model from a container, requiring the payload tensors to
    /// match the manifest exactly.
    pub fn from_container(c: &Container) -> Result<Self> {
        let mut lines = c.header.iter();
        let first = lines.next().ok_or_else(|| bad("empty manifest"))?;
        let head = first
            .strip_prefix("flow ")
            .ok_or_else(|| bad("first line must describe the flow"))?;
        let dim: usize = num(&fields(head), "dim")?;
        let mut image = None;
        let mut stages = Vec::new();
        let mut widths = Vec::new();
        let mut params = ParamSet::new();
        let mut active = dim;
        let take = |name: &str| -> Result<crate::diffcore::Tensor> {
            c.tensor(name)
                .cloned()
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        for line in lines {
            if let Some(rest) = line.strip_prefix("image ") {
                let f = fields(rest);
                let (ic, ih, iw): (usize, usize, usize) = (num(&f, "c")?, num(&f, "h")?, num(&f, "w")?);
                if ic * ih * iw != dim {
                    return Err(bad("image shape does not match dim"));
                }
                image = Some([ic, ih, iw]);
                continue;
            }
            let rest = line
                .strip_prefix("stage ")
                .ok_or_else(|| bad(format!("unrecognized line {line:?}")))?;
            let (kind, args) = rest.split_once(' ').unwrap_or((rest, ""));
            let f = fields(args);
            let prefix = format!("L{}", stages.len());
            let stage = match kind {
                "coupling" => {
                    let width: usize = num(&f, "width")?;
                    if width != active {
                        return Err(bad(format!("coupling width {width} at active width {active}")));
                    }
                    let cp = Coupling::new(
                        &prefix,
                        width,
                        list(&f, "part1")?,
                        list(&f, "part2")?,
                        num(&f, "hidden")?,
                        num(&f, "alpha")?,
                    )?;
                    for (name, shape) in cp.param_names() {
                        let t = take(&name)?;
                        if t.shape() != shape.as_slice() {
                            return Err(Error::Shape {
                                op: "flow checkpoint",
                                lhs: shape,
                                rhs: t.shape().to_vec(),
                            });
                        }
                        params.insert(name, t, true)?;
                    }
                    Stage::Coupling(cp)
                }
                "permutation" => {
                    let p = Permutation::new(list(&f, "perm")?)?;
                    if p.perm.len() != active {
                        return Err(bad("permutation length does not match active width"));
                    }
                    Stage::Permutation(p)
                }
                "squeeze" => {
                    let (sc, sh, sw): (usize, usize, usize) = (num(&f, "c")?, num(&f, "h")?, num(&f, "w")?);
                    if sc * sh * sw != active {
                        return Err(bad("squeeze shape does not match active width"));
                    }
                    Stage::Squeeze {
                        c: sc,
                        h: sh,
                        w: sw,
                        perm: Permutation::squeeze(sc, sh, sw)?,
                    }
                }
                "mixing" => {
                    let (ch, sp): (usize, usize) = (num(&f, "channels")?, num(&f, "spatial")?);
                    if ch * sp != active {
                        return Err(bad("mixing shape does not match active width"));
                    }
                    let name = format!("{prefix}.q");
                    let q = take(&name)?;
                    if q.shape() != [ch, ch] {
                        return Err(bad(format!("{name} has shape {:?}", q.shape())));
                    }
                    let m = Mixing::new(name.clone(), &q, sp)?;
                    params.insert(name, q, false)?;
                    Stage::Mixing(m)
                }
                "logit" => {
                    let l = Logit::new(num(&f, "width")?, num(&f, "shrink")?)?;
                    if l.width != active {
                        return Err(bad("logit width does not match active width"));
                    }
                    Stage::Logit(l)
                }
                "split" => {
                    let keep: usize = num(&f, "keep")?;
                    if keep == 0 || keep >= active {
                        return Err(bad(format!("split keep {keep} at active width {active}")));
                    }
                    widths.push(active);
                    stages.push(Stage::Split { keep });
                    active = keep;
                    continue;
                }
                other => return Err(bad(format!("unknown stage kind {other:?}"))),
            };
            widths.push(active);
            stages.push(stage);
        }
        if params.len() != c.tensors.len() {
            return Err(bad(format!(
                "payload holds {} tensors but the manifest describes {}",
                c.tensors.len(),
                params.len()
            )));
        }
        Ok(FlowModel {
            dim,
            image,
            stages,
            widths,
            params,
        })
    }

    /// Loads a checkpoint and requires it to describe the same architecture
    /// as `self`, then replaces `self`'s parameters.
    pub fn load_into(&mut self, c: &Container) -> Result<()> {
        if c.header != self.manifest() {
            return Err(Error::contract(
                "checkpoint manifest does not match the model architecture",
            ));
        }
        *self = Self::from_container(c)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::rng::stream;

    #[test]
    fn round_trip_preserves_structure() {
        let mut rng = stream(0, "t");
        let mut cfg = FlowConfig::image(1, 4, 4, 8);
        cfg.final_init_std = 0.1;
        let flow = cfg.build(&mut rng).unwrap();
        let bytes = flow.to_container().to_bytes().unwrap();
        let back = FlowModel::from_container(&Container::from_bytes(&bytes, FLOW_MAGIC).unwrap()).unwrap();
        assert_eq!(back.manifest(), flow.manifest());
        assert_eq!(back.stages, flow.stages);
        // Re-saving the loaded model is byte-identical.
        assert_eq!(back.to_container().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn mismatched_manifest_is_rejected() {
        let mut rng = stream(0, "t");
        let a = FlowConfig::flat(2, 1, 4).build(&mut rng).unwrap();
        let mut b = FlowConfig::flat(2, 2, 4).build(&mut rng).unwrap();
        assert!(b.load_into(&a.to_container()).is_err());
        let mut c = a.to_container();
        c.tensors.pop();
        assert!(FlowModel::from_container(&c).is_err());
    }
}
