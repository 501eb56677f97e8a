//! Deterministic token-level MDP over a small vocabulary, plus the ModSum
//! synthetic reasoning task family.
//!
//! A state is the concatenation of a task prompt and the tokens generated so
//! far. Actions append one token. An episode ends when the policy emits EOS
//! or the generated sequence hits `max_length`. Reward is binary and
//! terminal-only: 1 iff the token immediately preceding EOS equals the
//! task's answer token. Truncated episodes carry their (zero) reward on the
//! last emitted token, so the return of an episode always equals its final
//! per-step reward.
//!
//! ModSum tasks: the prompt lists `n` digits, the answer is their sum modulo
//! `base`. The reference solution spells out the running partial sums,
//! separated by SEP, then the answer and EOS: for digits (3, 5) it is
//! `[3, SEP, 8, SEP, 8, EOS]`.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Header line of the task file format.
pub const TASK_FILE_HEADER: &str = "deskrl-tasks v1";

/// Token vocabulary: `num_digits` content tokens (token id == digit value),
/// then SEP, then EOS. A padding id one past the vocabulary is reserved for
/// policy context windows and is never a legal action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    num_digits: u32,
}

impl Vocab {
    pub fn new(num_digits: u32) -> Result<Self> {
        if num_digits < 1 {
            return Err(Error::Config(
                "vocabulary needs at least one content token".into(),
            ));
        }
        Ok(Self { num_digits })
    }

    pub fn num_digits(&self) -> u32 {
        self.num_digits
    }

    pub fn size(&self) -> u32 {
        self.num_digits + 2
    }

    pub fn sep(&self) -> u32 {
        self.num_digits
    }

    pub fn eos(&self) -> u32 {
        self.num_digits + 1
    }

    /// Padding id used by policies to left-fill context windows. One past
    /// the vocabulary; never a valid action.
    pub fn pad(&self) -> u32 {
        self.size()
    }

    pub fn digit_token(&self, digit: u32) -> u32 {
        debug_assert!(digit < self.num_digits);
        digit
    }

    pub fn is_digit(&self, token: u32) -> bool {
        token < self.num_digits
    }
}

/// ModSum difficulty knobs: number of operand digits and the modulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Difficulty {
    pub n: u32,
    pub base: u32,
}

impl Difficulty {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("difficulty.n must be >= 1".into()));
        }
        if self.base < 2 {
            return Err(Error::Config("difficulty.base must be >= 2".into()));
        }
        if self.base > vocab.num_digits() {
            return Err(Error::Config(format!(
                "difficulty.base {} exceeds the {} digit tokens in the vocabulary",
                self.base,
                vocab.num_digits()
            )));
        }
        Ok(())
    }
}

/// One ModSum problem: a digit-token prompt and its answer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: Vec<u32>,
    pub answer: u32,
    pub difficulty: Difficulty,
}

/// Prompt plus generated tokens; the `terminal` flag is maintained by
/// [`Env::transition`] and is equivalent to "last generated token is EOS or
/// the generated sequence is at max length".
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenMdpState {
    prompt: Arc<[u32]>,
    generated: Vec<u32>,
    terminal: bool,
}

impl TokenMdpState {
    pub fn initial(task: &TaskInstance) -> Self {
        assert!(!task.prompt.is_empty(), "task prompt must be non-empty");
        Self {
            prompt: task.prompt.clone().into(),
            generated: Vec::new(),
            terminal: false,
        }
    }

    pub fn prompt(&self) -> &[u32] {
        &self.prompt
    }

    pub fn generated(&self) -> &[u32] {
        &self.generated
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Total token count (prompt + generated).
    pub fn len(&self) -> usize {
        self.prompt.len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the prompt is never empty
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.prompt.iter().chain(self.generated.iter()).copied()
    }

    /// Last `window` tokens, left-padded with `pad` when the sequence is
    /// shorter than the window.
    pub fn context(&self, window: usize, pad: u32) -> Vec<u32> {
        let mut ctx = vec![pad; window];
        let total = self.len();
        let take = window.min(total);
        let mut idx = window;
        for t in (total - take..total).rev() {
            idx -= 1;
            ctx[idx] = if t < self.prompt.len() {
                self.prompt[t]
            } else {
                self.generated[t - self.prompt.len()]
            };
        }
        ctx
    }

    /// Stable content hash of the full token sequence.
    pub fn state_id(&self) -> u64 {
        rng::fnv1a_tokens(self.tokens())
    }
}

/// The MDP itself: a vocabulary and a generation length cap. All operations
/// are pure, so one `Env` value can be shared freely across threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Env {
    pub vocab: Vocab,
    pub max_length: usize,
}

impl Env {
    pub fn new(vocab: Vocab, max_length: usize) -> Result<Self> {
        if max_length < 1 {
            return Err(Error::Config("max_length must be >= 1".into()));
        }
        Ok(Self { vocab, max_length })
    }

    /// Env for a ModSum difficulty with the default length cap of `2n + 2`
    /// tokens (n partial sums, n separators, the answer, and EOS).
    pub fn for_difficulty(difficulty: &Difficulty) -> Result<Self> {
        let vocab = Vocab::new(difficulty.base)?;
        difficulty.validate(&vocab)?;
        Env::new(vocab, 2 * difficulty.n as usize + 2)
    }

    /// Appends `action` to the state. Deterministic; the returned state is
    /// terminal iff the action is EOS or the generated sequence reaches
    /// `max_length`.
    pub fn transition(&self, state: &TokenMdpState, action: u32) -> Result<TokenMdpState> {
        if state.is_terminal() {
            return Err(Error::Contract(
                "transition called on a terminal state".into(),
            ));
        }
        if action >= self.vocab.size() {
            return Err(Error::Contract(format!(
                "action {action} outside vocabulary of size {}",
                self.vocab.size()
            )));
        }
        let mut generated = Vec::with_capacity(state.generated.len() + 1);
        generated.extend_from_slice(&state.generated);
        generated.push(action);
        let terminal = action == self.vocab.eos() || generated.len() >= self.max_length;
        Ok(TokenMdpState {
            prompt: state.prompt.clone(),
            generated,
            terminal,
        })
    }

    /// Binary terminal reward. Zero unless taking `action` in `state` ends
    /// the episode; at termination, 1 iff the generated token immediately
    /// preceding EOS is the task's answer. Truncated episodes (cap reached
    /// without EOS) have no submitted answer and score 0, carried on the
    /// last emitted token.
    pub fn reward(&self, state: &TokenMdpState, action: u32, task: &TaskInstance) -> f64 {
        if state.is_terminal() || action >= self.vocab.size() {
            return 0.0;
        }
        let new_len = state.generated.len() + 1;
        let terminal = action == self.vocab.eos() || new_len >= self.max_length;
        if !terminal {
            return 0.0;
        }
        if action != self.vocab.eos() {
            return 0.0;
        }
        match state.generated.last() {
            Some(&tok) if tok == task.answer => 1.0,
            _ => 0.0,
        }
    }

    /// `transition` and `reward` in one call.
    pub fn step(
        &self,
        state: &TokenMdpState,
        action: u32,
        task: &TaskInstance,
    ) -> Result<(TokenMdpState, f64)> {
        let reward = self.reward(state, action, task);
        let next = self.transition(state, action)?;
        Ok((next, reward))
    }
}

/// Draws a ModSum task: `n` digits uniform in `[0, base)`, answer is their
/// sum mod `base`. Deterministic given the seed.
pub fn generate_task(seed: u64, difficulty: &Difficulty, vocab: &Vocab) -> Result<TaskInstance> {
    difficulty.validate(vocab)?;
    let mut rng = rng::stream(seed, &[0x7a51]);
    let digits: Vec<u32> = (0..difficulty.n)
        .map(|_| rng.gen_range(0..difficulty.base))
        .collect();
    Ok(task_from_digits(&digits, difficulty, vocab))
}

/// Builds the task for an explicit digit list (used by tests and by the
/// exhaustive tiny-scale task sets).
pub fn task_from_digits(digits: &[u32], difficulty: &Difficulty, vocab: &Vocab) -> TaskInstance {
    debug_assert_eq!(digits.len(), difficulty.n as usize);
    let answer_digit = digits.iter().fold(0u32, |acc, &d| (acc + d) % difficulty.base);
    TaskInstance {
        prompt: digits.iter().map(|&d| vocab.digit_token(d)).collect(),
        answer: vocab.digit_token(answer_digit),
        difficulty: *difficulty,
    }
}

/// Generates `count` tasks with per-index derived seeds, so a task set is a
/// pure function of `(seed, count, difficulty)` and any prefix of it is
/// stable when `count` grows.
pub fn generate_tasks(
    seed: u64,
    count: usize,
    difficulty: &Difficulty,
    vocab: &Vocab,
) -> Result<Vec<TaskInstance>> {
    difficulty.validate(vocab)?;
    (0..count)
        .map(|i| generate_task(seed.wrapping_add(i as u64).wrapping_mul(2) ^ i as u64, difficulty, vocab))
        .collect()
}

/// The step-by-step solution: running partial sums mod base, SEP-delimited,
/// then the answer and EOS. Always earns reward 1.
pub fn reference_solution(task: &TaskInstance, vocab: &Vocab) -> Vec<u32> {
    let base = task.difficulty.base;
    let mut out = Vec::with_capacity(2 * task.prompt.len() + 2);
    let mut sum = 0u32;
    for &tok in &task.prompt {
        sum = (sum + tok) % base;
        out.push(vocab.digit_token(sum));
        out.push(vocab.sep());
    }
    out.push(task.answer);
    out.push(vocab.eos());
    out
}

/// One sampled episode: the task, the action sequence, per-step rewards and
/// behavior log-probs (model log-probs of the sampled actions), and the
/// episode return.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: TaskInstance,
    pub actions: Vec<u32>,
    pub rewards: Vec<f64>,
    pub logprobs: Vec<f64>,
    pub ret: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// States s_0 ..= s_T (one more than the number of actions); the last
    /// entry is terminal.
    pub fn states(&self, env: &Env) -> Vec<TokenMdpState> {
        let mut states = Vec::with_capacity(self.actions.len() + 1);
        let mut s = TokenMdpState::initial(&self.task);
        for &a in &self.actions {
            let next = env
                .transition(&s, a)
                .expect("trajectory replays within its own env");
            states.push(s);
            s = next;
        }
        states.push(s);
        states
    }
}

/// Writes a task set in the line-delimited text format:
/// a header line, then one `prompt-csv<TAB>answer<TAB>n<TAB>base` per task.
pub fn write_tasks<W: Write>(mut w: W, tasks: &[TaskInstance]) -> Result<()> {
    writeln!(w, "{TASK_FILE_HEADER}")?;
    for t in tasks {
        let prompt = t
            .prompt
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "{prompt}\t{}\t{}\t{}", t.answer, t.difficulty.n, t.difficulty.base)?;
    }
    Ok(())
}

pub fn write_tasks_file(path: &Path, tasks: &[TaskInstance]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_tasks(std::io::BufWriter::new(f), tasks)
}

pub fn read_tasks<R: BufRead>(r: R) -> Result<Vec<TaskInstance>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Artifact("empty task file".into()))??;
    if header.trim() != TASK_FILE_HEADER {
        return Err(Error::Artifact(format!(
            "unsupported task file header: {header:?} (expected {TASK_FILE_HEADER:?})"
        )));
    }
    let mut tasks = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Artifact(format!(
                "task line {}: expected 4 tab-separated fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_u32 = |s: &str, what: &str| {
            s.trim().parse::<u32>().map_err(|_| {
                Error::Artifact(format!("task line {}: bad {what}: {s:?}", lineno + 2))
            })
        };
        let prompt = fields[0]
            .split(',')
            .map(|s| parse_u32(s, "prompt token"))
            .collect::<Result<Vec<u32>>>()?;
        let answer = parse_u32(fields[1], "answer")?;
        let n = parse_u32(fields[2], "n")?;
        let base = parse_u32(fields[3], "base")?;
        tasks.push(TaskInstance {
            prompt,
            answer,
            difficulty: Difficulty { n, base },
        });
    }
    Ok(tasks)
}

pub fn read_tasks_file(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = std::fs::File::open(path)?;
    read_tasks(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base10() -> (Vocab, Difficulty) {
        (Vocab::new(10).unwrap(), Difficulty { n: 2, base: 10 })
    }

    #[test]
    fn transition_appends_and_stays_open() {
        let (vocab, diff) = base10();
        let env = Env::new(vocab, 6).unwrap();
        let task = task_from_digits(&[3, 5], &diff, &vocab);
        let s0 = TokenMdpState::initial(&task);
        let s1 = env.transition(&s0, vocab.sep()).unwrap();
        assert_eq!(s1.generated(), &[vocab.sep()]);
        assert!(!s1.is_terminal());
    }

    #[test]
    fn eos_terminates() {
        let (vocab, diff) = base10();
        let env = Env::new(vocab, 6).unwrap();
        let task = task_from_digits(&[3, 5], &diff, &vocab);
        let s0 = TokenMdpState::initial(&task);
        let s1 = env.transition(&s0, 8).unwrap();
        let s2 = env.transition(&s1, vocab.eos()).unwrap();
        assert!(s2.is_terminal());
    }

    #[test]
    fn max_length_truncates() {
        let (vocab, diff) = base10();
        let env = Env::new(vocab, 3).unwrap();
        let task = task_from_digits(&[3, 5], &diff, &vocab);
        let mut s = TokenMdpState::initial(&task);
        for _ in 0..3 {
            s = env.transition(&s, 1).unwrap();
        }
        assert!(s.is_terminal());
        assert!(env.transition(&s, 1).is_err(), "terminal state must reject actions");
    }

    #[test]
    fn reward_cases() {
        let (vocab, diff) = base10();
        let env = Env::new(vocab, 6).unwrap();
        let task = task_from_digits(&[3, 5], &diff, &vocab); // answer 8
        let s0 = TokenMdpState::initial(&task);
        // mid-episode content token
        assert_eq!(env.reward(&s0, 8, &task), 0.0);
        let s1 = env.transition(&s0, 8).unwrap();
        // terminal with correct final answer
        assert_eq!(env.reward(&s1, vocab.eos(), &task), 1.0);
        // terminal with wrong answer
        let s1b = env.transition(&s0, 7).unwrap();
        assert_eq!(env.reward(&s1b, vocab.eos(), &task), 0.0);
        // immediate EOS: nothing precedes it
        assert_eq!(env.reward(&s0, vocab.eos(), &task), 0.0);
    }

    #[test]
    fn truncation_gets_zero_reward_on_last_token() {
        let (vocab, diff) = base10();
        let env = Env::new(vocab, 2).unwrap();
        let task = task_from_digits(&[3, 5], &diff, &vocab);
        let s0 = TokenMdpState::initial(&task);
        let s1 = env.transition(&s0, 8).unwrap();
        assert!(!s1.is_terminal());
        // emitting the answer again hits the cap without EOS
        assert_eq!(env.reward(&s1, 8, &task), 0.0);
        assert!(env.transition(&s1, 8).unwrap().is_terminal());
    }

    #[test]
    fn generate_task_examples() {
        let (vocab, diff) = base10();
        let t = task_from_digits(&[3, 5], &diff, &vocab);
        assert_eq!(t.answer, 8);
        let t = task_from_digits(&[7, 8], &diff, &vocab);
        assert_eq!(t.answer, 5);
        let a = generate_task(99, &diff, &vocab).unwrap();
        let b = generate_task(99, &diff, &vocab).unwrap();
        assert_eq!(a, b, "same seed must give the same task");
    }

    #[test]
    fn generate_task_rejects_bad_difficulty() {
        let vocab = Vocab::new(4).unwrap();
        let err = generate_task(1, &Difficulty { n: 0, base: 2 }, &vocab);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = generate_task(1, &Difficulty { n: 2, base: 11 }, &vocab);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn reference_solution_examples() {
        let (vocab, _) = base10();
        let d2 = Difficulty { n: 2, base: 10 };
        let task = task_from_digits(&[3, 5], &d2, &vocab);
        assert_eq!(
            reference_solution(&task, &vocab),
            vec![3, vocab.sep(), 8, vocab.sep(), 8, vocab.eos()]
        );
        let d3 = Difficulty { n: 3, base: 10 };
        let task = task_from_digits(&[7, 8, 1], &d3, &vocab);
        assert_eq!(
            reference_solution(&task, &vocab),
            vec![7, vocab.sep(), 5, vocab.sep(), 6, vocab.sep(), 6, vocab.eos()]
        );
    }

    #[test]
    fn reference_solution_earns_reward_one_on_random_tasks() {
        let vocab = Vocab::new(10).unwrap();
        for i in 0..1000u64 {
            let n = 1 + (i % 7) as u32;
            let diff = Difficulty { n, base: 10 };
            let env = Env::for_difficulty(&diff).unwrap();
            let task = generate_task(i, &diff, &vocab).unwrap();
            let mut s = TokenMdpState::initial(&task);
            let mut total = 0.0;
            for &a in &reference_solution(&task, &vocab) {
                let (next, r) = env.step(&s, a, &task).unwrap();
                total += r;
                s = next;
            }
            assert!(s.is_terminal());
            assert_eq!(total, 1.0, "reference solution failed on task {i} ({task:?})");
        }
    }

    #[test]
    fn context_left_pads() {
        let (vocab, diff) = base10();
        let task = task_from_digits(&[3, 5], &diff, &vocab);
        let s = TokenMdpState::initial(&task);
        let pad = vocab.pad();
        assert_eq!(s.context(4, pad), vec![pad, pad, 3, 5]);
        assert_eq!(s.context(2, pad), vec![3, 5]);
        assert_eq!(s.context(1, pad), vec![5]);
    }

    #[test]
    fn task_file_round_trip() {
        let vocab = Vocab::new(10).unwrap();
        let diff = Difficulty { n: 3, base: 10 };
        let tasks = generate_tasks(5, 17, &diff, &vocab).unwrap();
        let mut buf = Vec::new();
        write_tasks(&mut buf, &tasks).unwrap();
        let back = read_tasks(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(tasks, back);
    }

    #[test]
    fn task_file_rejects_bad_header() {
        let data = b"not-a-task-file\n1,2\t3\t2\t10\n";
        assert!(matches!(
            read_tasks(std::io::Cursor::new(&data[..])),
            Err(Error::Artifact(_))
        ));
    }
}
