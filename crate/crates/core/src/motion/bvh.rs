//! BVH (BioVision Hierarchy) text format: a HIERARCHY section describing the
//! joint tree and a MOTION section of whitespace-delimited channel rows.
//! Rotation channels are Euler angles in degrees, applied in channel order.

use super::{Channel, Joint, MotionError, PoseSequence, Skeleton};
use crate::linalg::Mat;

/// A parsed BVH file: the skeleton plus the raw motion block exactly as
/// stored (degrees / length units), one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BvhDocument {
    pub skeleton: Skeleton,
    pub frames: Mat,
    pub frame_time: f64,
}

impl BvhDocument {
    pub fn fps(&self) -> f64 {
        1.0 / self.frame_time
    }
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            for tok in line.split_whitespace() {
                items.push((i + 1, tok));
            }
        }
        Tokens { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos.min(self.items.len().saturating_sub(1)))
            .map_or(0, |t| t.0)
    }

    fn peek(&self) -> Option<&'a str> {
        self.items.get(self.pos).map(|t| t.1)
    }

    fn next(&mut self) -> Result<(usize, &'a str), MotionError> {
        let item = self.items.get(self.pos).copied().ok_or(MotionError::Parse {
            line: self.line(),
            msg: "unexpected end of file".into(),
        })?;
        self.pos += 1;
        Ok(item)
    }

    fn expect(&mut self, word: &str) -> Result<usize, MotionError> {
        let (line, tok) = self.next()?;
        if tok != word {
            return Err(MotionError::Parse {
                line,
                msg: format!("expected '{word}', found '{tok}'"),
            });
        }
        Ok(line)
    }

    fn number(&mut self) -> Result<(usize, f64), MotionError> {
        let (line, tok) = self.next()?;
        let v = tok.parse::<f64>().map_err(|_| MotionError::Parse {
            line,
            msg: format!("expected a number, found '{tok}'"),
        })?;
        Ok((line, v))
    }
}

fn parse_channel(tok: &str, line: usize) -> Result<Channel, MotionError> {
    match tok {
        "Xposition" => Ok(Channel::XPosition),
        "Yposition" => Ok(Channel::YPosition),
        "Zposition" => Ok(Channel::ZPosition),
        "Xrotation" => Ok(Channel::XRotation),
        "Yrotation" => Ok(Channel::YRotation),
        "Zrotation" => Ok(Channel::ZRotation),
        other => Err(MotionError::Parse {
            line,
            msg: format!("unknown channel '{other}'"),
        }),
    }
}

fn parse_joint_body(
    toks: &mut Tokens,
    joints: &mut Vec<Joint>,
    me: usize,
) -> Result<(), MotionError> {
    toks.expect("{")?;
    toks.expect("OFFSET")?;
    let mut offset = [0.0; 3];
    for o in &mut offset {
        *o = toks.number()?.1;
    }
    if !offset.iter().all(|v| v.is_finite()) {
        return Err(MotionError::Parse {
            line: toks.line(),
            msg: "non-finite offset".into(),
        });
    }
    joints[me].offset = offset;
    let line = toks.expect("CHANNELS")?;
    let (_, n) = toks.number()?;
    if n < 0.0 || n.fract() != 0.0 || n > 6.0 {
        return Err(MotionError::Parse {
            line,
            msg: format!("invalid channel count {n}"),
        });
    }
    for _ in 0..n as usize {
        let (cl, tok) = toks.next()?;
        joints[me].channels.push(parse_channel(tok, cl)?);
    }
    loop {
        match toks.peek() {
            Some("JOINT") => {
                toks.next()?;
                let (_, name) = toks.next()?;
                let child = joints.len();
                joints.push(Joint {
                    name: name.to_string(),
                    parent: Some(me),
                    offset: [0.0; 3],
                    channels: Vec::new(),
                    end_site: None,
                });
                parse_joint_body(toks, joints, child)?;
            }
            Some("End") => {
                toks.next()?;
                toks.expect("Site")?;
                toks.expect("{")?;
                toks.expect("OFFSET")?;
                let mut es = [0.0; 3];
                for o in &mut es {
                    *o = toks.number()?.1;
                }
                toks.expect("}")?;
                joints[me].end_site = Some(es);
            }
            Some("}") => {
                toks.next()?;
                return Ok(());
            }
            Some(other) => {
                return Err(MotionError::Parse {
                    line: toks.line(),
                    msg: format!("unexpected token '{other}' in joint body"),
                })
            }
            None => {
                return Err(MotionError::Parse {
                    line: toks.line(),
                    msg: "unexpected end of file in joint body".into(),
                })
            }
        }
    }
}

/// Parse a BVH document. Joint order, channel order, frame count, and frame
/// time are preserved exactly; rotation values stay in their native Euler
/// form (degrees).
pub fn parse_bvh(text: &str) -> Result<BvhDocument, MotionError> {
    let mut toks = Tokens::new(text);
    toks.expect("HIERARCHY")?;
    toks.expect("ROOT")?;
    let (_, root_name) = toks.next()?;
    let mut joints = vec![Joint {
        name: root_name.to_string(),
        parent: None,
        offset: [0.0; 3],
        channels: Vec::new(),
        end_site: None,
    }];
    parse_joint_body(&mut toks, &mut joints, 0)?;
    let skeleton = Skeleton { joints };

    toks.expect("MOTION")?;
    toks.expect("Frames:")?;
    let (fl, nframes) = toks.number()?;
    if nframes < 0.0 || nframes.fract() != 0.0 {
        return Err(MotionError::Parse {
            line: fl,
            msg: format!("invalid frame count {nframes}"),
        });
    }
    let nframes = nframes as usize;
    toks.expect("Frame")?;
    toks.expect("Time:")?;
    let (tl, frame_time) = toks.number()?;
    if !(frame_time > 0.0) || !frame_time.is_finite() {
        return Err(MotionError::NonPositiveFrameTime {
            value: frame_time,
            line: tl,
        });
    }
    let width = skeleton.total_channels();
    let mut frames = Mat::zeros(nframes, width);
    for f in 0..nframes {
        let row_line = toks.line();
        for c in 0..width {
            match toks.next() {
                Ok((line, tok)) => {
                    let v = tok.parse::<f64>().map_err(|_| MotionError::Parse {
                        line,
                        msg: format!("expected a motion value, found '{tok}'"),
                    })?;
                    frames[(f, c)] = v;
                }
                Err(_) => {
                    return Err(MotionError::ChannelCountMismatch {
                        row: f,
                        line: row_line,
                        got: c,
                        expected: width,
                    })
                }
            }
        }
    }
    if toks.peek().is_some() {
        return Err(MotionError::ChannelCountMismatch {
            row: nframes,
            line: toks.line(),
            got: toks.items.len() - toks.pos,
            expected: 0,
        });
    }
    Ok(BvhDocument {
        skeleton,
        frames,
        frame_time,
    })
}

fn write_joint(out: &mut String, skel: &Skeleton, j: usize, depth: usize) {
    let pad = "  ".repeat(depth);
    let joint = &skel.joints[j];
    if joint.parent.is_none() {
        out.push_str(&format!("ROOT {}\n", joint.name));
    } else {
        out.push_str(&format!("{pad}JOINT {}\n", joint.name));
    }
    out.push_str(&format!("{pad}{{\n"));
    let inner = "  ".repeat(depth + 1);
    out.push_str(&format!(
        "{inner}OFFSET {:.6} {:.6} {:.6}\n",
        joint.offset[0], joint.offset[1], joint.offset[2]
    ));
    out.push_str(&format!("{inner}CHANNELS {}", joint.channels.len()));
    for c in &joint.channels {
        out.push(' ');
        out.push_str(c.bvh_name());
    }
    out.push('\n');
    let children: Vec<usize> = (0..skel.num_joints())
        .filter(|&c| skel.joints[c].parent == Some(j))
        .collect();
    for c in &children {
        write_joint(out, skel, *c, depth + 1);
    }
    if children.is_empty() {
        let es = joint.end_site.unwrap_or([0.0; 3]);
        out.push_str(&format!("{inner}End Site\n{inner}{{\n"));
        out.push_str(&format!(
            "{inner}  OFFSET {:.6} {:.6} {:.6}\n",
            es[0], es[1], es[2]
        ));
        out.push_str(&format!("{inner}}}\n"));
    }
    out.push_str(&format!("{pad}}}\n"));
}

/// Serialize a document back to BVH text. Numbers carry six decimal places,
/// which round-trips the motion block to well under 1e-5.
pub fn write_bvh_document(doc: &BvhDocument) -> String {
    let mut out = String::from("HIERARCHY\n");
    write_joint(&mut out, &doc.skeleton, 0, 0);
    out.push_str("MOTION\n");
    out.push_str(&format!("Frames: {}\n", doc.frames.rows()));
    out.push_str(&format!("Frame Time: {:.8}\n", doc.frame_time));
    for f in 0..doc.frames.rows() {
        let row = doc.frames.row(f);
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            out.push_str(&format!("{v:.6}"));
            first = false;
        }
        out.push('\n');
    }
    out
}

/// Serialize an exponential-map pose sequence as BVH.
pub fn write_bvh(skeleton: &Skeleton, pose: &PoseSequence) -> Result<String, MotionError> {
    let doc = super::pose_to_document(skeleton, pose)?;
    Ok(write_bvh_document(&doc))
}
