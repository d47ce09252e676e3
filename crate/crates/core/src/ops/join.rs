use crate::api::{MsgTuple, VertexId, VertexTuple};
use crate::error::{Error, Result};
use crate::storage::{IndexCursor, VertexIndex};

/// One input row for compute: a vid with its combined payload and stored
/// vertex, either of which may be NULL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinRow {
    pub vid: VertexId,
    pub payload: Option<Vec<u8>>,
    pub vertex: Option<VertexTuple>,
}

impl JoinRow {
    /// The filter in front of compute: active vertices and vertices with a
    /// message.
    pub fn selected(&self) -> bool {
        self.payload.is_some() || self.vertex.as_ref().is_some_and(|v| !v.halt)
    }
}

fn ascending(last: &mut Option<VertexId>, vid: VertexId, what: &str) -> Result<()> {
    if last.is_some_and(|l| vid <= l) {
        return Err(Error::contract(format!(
            "{what} is not strictly vid-ascending at {vid}"
        )));
    }
    *last = Some(vid);
    Ok(())
}

/// Merge of a full vertex index scan with the sorted message stream.
pub struct FullOuterJoin<'a, M> {
    cursor: IndexCursor<'a>,
    msgs: M,
    next_v: Option<VertexTuple>,
    v_done: bool,
    next_m: Option<MsgTuple>,
    m_done: bool,
    last_m: Option<VertexId>,
    on_stored: bool,
}

pub fn index_full_outer_join<M>(idx: &VertexIndex, msgs: M) -> Result<FullOuterJoin<'_, M::IntoIter>>
where
    M: IntoIterator<Item = Result<MsgTuple>>,
{
    Ok(FullOuterJoin {
        cursor: idx.scan(None)?,
        msgs: msgs.into_iter(),
        next_v: None,
        v_done: false,
        next_m: None,
        m_done: false,
        last_m: None,
        on_stored: false,
    })
}

impl<M> FullOuterJoin<'_, M>
where
    M: Iterator<Item = Result<MsgTuple>>,
{
    pub fn next_row(&mut self) -> Result<Option<JoinRow>> {
        self.on_stored = false;
        if self.next_v.is_none() && !self.v_done {
            self.next_v = self.cursor.next_vertex()?;
            self.v_done = self.next_v.is_none();
        }
        if self.next_m.is_none() && !self.m_done {
            match self.msgs.next().transpose()? {
                Some(m) => {
                    ascending(&mut self.last_m, m.vid, "message stream")?;
                    self.next_m = Some(m);
                }
                None => self.m_done = true,
            }
        }
        let take_v = match (&self.next_v, &self.next_m) {
            (None, None) => return Ok(None),
            (Some(_), None) => (true, false),
            (None, Some(_)) => (false, true),
            (Some(v), Some(m)) => (v.vid <= m.vid, m.vid <= v.vid),
        };
        let vertex = if take_v.0 { self.next_v.take() } else { None };
        let msg = if take_v.1 { self.next_m.take() } else { None };
        self.on_stored = vertex.is_some();
        let vid = vertex.as_ref().map(|v| v.vid).or(msg.as_ref().map(|m| m.vid)).unwrap();
        Ok(Some(JoinRow {
            vid,
            payload: msg.and_then(|m| m.payload),
            vertex,
        }))
    }

    /// Rewrites the stored vertex of the last row in place. False when the
    /// row had no stored vertex or the write does not fit in place.
    pub fn update_in_place(&mut self, v: &VertexTuple) -> Result<bool> {
        if !self.on_stored {
            return Ok(false);
        }
        self.cursor.update_current(v)
    }
}

impl<M> Iterator for FullOuterJoin<'_, M>
where
    M: Iterator<Item = Result<MsgTuple>>,
{
    type Item = Result<JoinRow>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_row().transpose()
    }
}

/// Emits `(vid, NULL)` for a vertex that stays active after compute.
pub fn null_msg(v: &VertexTuple) -> Option<MsgTuple> {
    (!v.halt).then(|| MsgTuple::null(v.vid))
}

/// Sorted union of the message stream and the active-vid stream; the
/// message wins on equal vids.
pub struct MergeMsgVid<M, V> {
    msgs: M,
    vids: V,
    next_m: Option<MsgTuple>,
    m_done: bool,
    next_v: Option<VertexId>,
    v_done: bool,
    last_m: Option<VertexId>,
    last_v: Option<VertexId>,
}

pub fn merge_msg_vid<M, V>(msgs: M, vids: V) -> MergeMsgVid<M::IntoIter, V::IntoIter>
where
    M: IntoIterator<Item = Result<MsgTuple>>,
    V: IntoIterator<Item = Result<VertexId>>,
{
    MergeMsgVid {
        msgs: msgs.into_iter(),
        vids: vids.into_iter(),
        next_m: None,
        m_done: false,
        next_v: None,
        v_done: false,
        last_m: None,
        last_v: None,
    }
}

impl<M, V> MergeMsgVid<M, V>
where
    M: Iterator<Item = Result<MsgTuple>>,
    V: Iterator<Item = Result<VertexId>>,
{
    fn step(&mut self) -> Result<Option<MsgTuple>> {
        if self.next_m.is_none() && !self.m_done {
            match self.msgs.next().transpose()? {
                Some(m) => {
                    ascending(&mut self.last_m, m.vid, "message stream")?;
                    self.next_m = Some(m);
                }
                None => self.m_done = true,
            }
        }
        if self.next_v.is_none() && !self.v_done {
            match self.vids.next().transpose()? {
                Some(v) => {
                    ascending(&mut self.last_v, v, "vid stream")?;
                    self.next_v = Some(v);
                }
                None => self.v_done = true,
            }
        }
        Ok(match (self.next_m.as_ref(), self.next_v) {
            (None, None) => None,
            (Some(_), None) => self.next_m.take(),
            (None, Some(v)) => {
                self.next_v = None;
                Some(MsgTuple::null(v))
            }
            (Some(m), Some(v)) => {
                if m.vid <= v {
                    if m.vid == v {
                        self.next_v = None;
                    }
                    self.next_m.take()
                } else {
                    self.next_v = None;
                    Some(MsgTuple::null(v))
                }
            }
        })
    }
}

impl<M, V> Iterator for MergeMsgVid<M, V>
where
    M: Iterator<Item = Result<MsgTuple>>,
    V: Iterator<Item = Result<VertexId>>,
{
    type Item = Result<MsgTuple>;

    fn next(&mut self) -> Option<Self::Item> {
        self.step().transpose()
    }
}

/// Probes the vertex index for every input vid, in ascending order.
pub struct LeftOuterJoin<'a, I> {
    prober: IndexCursor<'a>,
    input: I,
    last: Option<VertexId>,
    on_stored: bool,
}

pub fn index_left_outer_join<I>(idx: &VertexIndex, input: I) -> LeftOuterJoin<'_, I::IntoIter>
where
    I: IntoIterator<Item = Result<MsgTuple>>,
{
    LeftOuterJoin {
        prober: idx.prober(),
        input: input.into_iter(),
        last: None,
        on_stored: false,
    }
}

impl<I> LeftOuterJoin<'_, I>
where
    I: Iterator<Item = Result<MsgTuple>>,
{
    pub fn next_row(&mut self) -> Result<Option<JoinRow>> {
        self.on_stored = false;
        let Some(m) = self.input.next().transpose()? else {
            return Ok(None);
        };
        ascending(&mut self.last, m.vid, "left outer join input")?;
        let vertex = self.prober.probe(m.vid)?;
        self.on_stored = vertex.is_some();
        Ok(Some(JoinRow {
            vid: m.vid,
            payload: m.payload,
            vertex,
        }))
    }

    pub fn update_in_place(&mut self, v: &VertexTuple) -> Result<bool> {
        if !self.on_stored {
            return Ok(false);
        }
        self.prober.update_current(v)
    }
}

impl<I> Iterator for LeftOuterJoin<'_, I>
where
    I: Iterator<Item = Result<MsgTuple>>,
{
    type Item = Result<JoinRow>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_row().transpose()
    }
}
