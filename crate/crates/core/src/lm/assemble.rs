use crate::corpus::tokenizer::{Tokenizer, ASSISTANT, SYSTEM, USER};
use crate::error::{Error, Result};
use crate::prompts::Task;

/// Which loss term a target token feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpanKind {
    Asr,
    Ser,
}

/// Text pieces of one sample before tokenisation.
#[derive(Clone, Copy, Debug)]
pub struct Layout<'a> {
    pub id: &'a str,
    pub system: &'a str,
    pub guide: &'a str,
    pub prompt: &'a str,
    pub aux: &'a str,
    /// Start of the assistant turn supplied as context, not as target.
    pub answer_prefix: &'a str,
    pub target: &'a str,
    pub task: Task,
}

/// Token layout of one sample:
/// `[preamble, guide, audio × n_audio, prompt, aux, header, target]`.
///
/// `preamble` and `guide` are identical for every sample that shares a
/// system prompt, which lets a batch compute them once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledInput {
    pub id: String,
    pub preamble: Vec<u32>,
    pub guide: Vec<u32>,
    pub n_audio: usize,
    pub prompt: Vec<u32>,
    pub aux: Vec<u32>,
    pub header: Vec<u32>,
    pub target: Vec<u32>,
    pub target_kinds: Vec<SpanKind>,
}

impl AssembledInput {
    pub fn shared_prefix(&self) -> Vec<u32> {
        [self.preamble.as_slice(), &self.guide].concat()
    }

    pub fn prefix_len(&self) -> usize {
        self.preamble.len() + self.guide.len()
    }

    /// Token rows after the audio block.
    pub fn suffix_tokens(&self) -> Vec<u32> {
        [self.prompt.as_slice(), &self.aux, &self.header, &self.target].concat()
    }

    pub fn context_len(&self) -> usize {
        self.total_len() - self.target.len()
    }

    pub fn total_len(&self) -> usize {
        self.preamble.len()
            + self.guide.len()
            + self.n_audio
            + self.prompt.len()
            + self.aux.len()
            + self.header.len()
            + self.target.len()
    }

    /// True exactly on target positions.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.context_len()];
        m.resize(self.total_len(), true);
        m
    }

    /// Decoded text of everything except the target, with the audio block
    /// shown as a placeholder.
    pub fn context_text(&self, tok: &Tokenizer) -> String {
        format!(
            "{}{}<audio×{}>{}{}{}",
            tok.decode(&self.preamble),
            tok.decode(&self.guide),
            self.n_audio,
            tok.decode(&self.prompt),
            tok.decode(&self.aux),
            tok.decode(&self.header)
        )
    }

    /// Copy without target tokens, as used for generation.
    pub fn without_target(&self) -> AssembledInput {
        AssembledInput {
            target: Vec::new(),
            target_kinds: Vec::new(),
            ..self.clone()
        }
    }
}

pub fn preamble_text(system: &str) -> String {
    format!("{SYSTEM}\n{system}\n{USER}\n")
}

/// Tokenises each region separately so that region boundaries are also
/// token boundaries.
pub fn assemble(layout: &Layout<'_>, n_audio: usize, tok: &Tokenizer, max_seq_len: usize) -> Result<AssembledInput> {
    let aux = if layout.aux.is_empty() {
        Vec::new()
    } else {
        tok.encode(&format!("\n{}", layout.aux))
    };
    let target = tok.encode(layout.target);
    let mut pipes = 0;
    let target_kinds = target
        .iter()
        .map(|&id| {
            let kind = match layout.task {
                Task::Asr => SpanKind::Asr,
                Task::Ser => SpanKind::Ser,
                Task::Joint if pipes < 2 => SpanKind::Asr,
                Task::Joint => SpanKind::Ser,
            };
            pipes += tok.pipe_count(id);
            kind
        })
        .collect();
    let a = AssembledInput {
        id: layout.id.to_string(),
        preamble: tok.encode(&preamble_text(layout.system)),
        guide: tok.encode(layout.guide),
        n_audio,
        prompt: tok.encode(&format!("\n{}", layout.prompt)),
        aux,
        header: tok.encode(&format!("\n{ASSISTANT}\n{}", layout.answer_prefix)),
        target,
        target_kinds,
    };
    if a.total_len() > max_seq_len {
        return Err(Error::SequenceTooLong {
            id: a.id.clone(),
            len: a.total_len(),
            limit: max_seq_len,
        });
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::build(
            ["hello world | ASR: Emotion: Here are some audio tokens: Transcribe it"],
            2000,
        )
        .unwrap()
    }

    fn layout<'a>(aux: &'a str, target: &'a str, task: Task) -> Layout<'a> {
        Layout {
            id: "u1",
            system: "Be brief.",
            guide: "Here are some audio tokens:",
            prompt: "Transcribe it.",
            aux,
            answer_prefix: "",
            target,
            task,
        }
    }

    #[test]
    fn lengths_add_up_and_mask_covers_target() {
        let t = tok();
        let a = assemble(&layout("", "| ASR: hello world |", Task::Asr), 4, &t, 512).unwrap();
        assert!(a.aux.is_empty());
        let n = a.preamble.len() + a.guide.len() + 4 + a.prompt.len() + a.header.len() + a.target.len();
        assert_eq!(a.total_len(), n);
        assert_eq!(
            a.loss_mask().iter().filter(|&&m| m).count(),
            t.encode("| ASR: hello world |").len()
        );
        assert!(a.loss_mask()[..a.context_len()].iter().all(|&m| !m));

        let b = assemble(&layout("hint text", "| ASR: hello world |", Task::Asr), 4, &t, 512).unwrap();
        assert_eq!(b.prompt, a.prompt);
        assert_eq!(b.total_len(), a.total_len() + b.aux.len());
    }

    #[test]
    fn joint_targets_split_after_second_pipe() {
        let t = tok();
        let a = assemble(&layout("", "| ASR: hello | Emotion: H |", Task::Joint), 2, &t, 512).unwrap();
        let asr = a.target_kinds.iter().filter(|&&k| k == SpanKind::Asr).count();
        assert_eq!(asr, t.encode("| ASR: hello |").len());
        assert_eq!(a.target_kinds.len() - asr, t.encode(" Emotion: H |").len());
    }

    #[test]
    fn overflow_names_sample() {
        let t = tok();
        match assemble(&layout("", "| ASR: hello |", Task::Asr), 4, &t, 10) {
            Err(Error::SequenceTooLong { id, limit, .. }) => assert_eq!((id.as_str(), limit), ("u1", 10)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn answer_prefix_ends_context() {
        let t = tok();
        let mut l = layout("", "", Task::Joint);
        l.answer_prefix = "| ASR: hello | Emotion:";
        let a = assemble(&l, 2, &t, 512).unwrap();
        assert!(a.context_text(&t).ends_with("| ASR: hello | Emotion:"));
        assert!(a.target.is_empty());
    }
}
