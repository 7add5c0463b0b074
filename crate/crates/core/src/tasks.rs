//! Synthetic tasks with verifiable integer answers.
//!
//! Every solution is written as short newline-separated steps ending in
//! `= <answer>`, which is what [`crate::population::extract_answer`] parses.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::extract_answer;
use crate::rng::stream;
use crate::tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// `a+b mod p` with `a, b < p`.
    ModAdd { modulus: u32 },
    /// Column-wise addition of operands with up to `max_digits` digits.
    MultiDigitAdd { max_digits: u32 },
    /// Maximum of a list of 2..=`max_len` values in `0..=max_value`.
    ListMax { max_len: usize, max_value: u32 },
}

impl Default for TaskKind {
    fn default() -> Self {
        TaskKind::ModAdd { modulus: 97 }
    }
}

// Unknown keys are still rejected: everything the struct does not consume is
// handed to the flattened `TaskKind`, which denies them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_eval")]
    pub n_eval: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_train() -> usize {
    400
}

fn default_eval() -> usize {
    100
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { kind: TaskKind::default(), n_train: default_train(), n_eval: default_eval(), seed: 0 }
    }
}

/// One task instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Instance {
    pub prompt: String,
    /// Canonical ground-truth answer.
    pub answer: String,
    /// Reference step-by-step response (without the end token).
    pub solution: String,
    pub difficulty: usize,
}

impl Instance {
    pub fn prompt_tokens(&self) -> Vec<u32> {
        tokenizer::encode_prompt(&self.prompt).expect("task alphabet is in the vocabulary")
    }

    /// `BOS prompt solution EOS` and the index of the first response token.
    pub fn training_tokens(&self) -> (Vec<u32>, usize) {
        let mut ids = self.prompt_tokens();
        let start = ids.len();
        ids.extend(tokenizer::encode(&self.solution).expect("task alphabet"));
        ids.push(tokenizer::EOS);
        (ids, start)
    }
}

fn digits_of(mut n: u64) -> Vec<u32> {
    let mut d = Vec::new();
    loop {
        d.push((n % 10) as u32);
        n /= 10;
        if n == 0 {
            return d;
        }
    }
}

fn mod_add(a: u32, b: u32, p: u32, difficulty: usize) -> Instance {
    let s = a + b;
    let mut solution = format!("{a}+{b}={s}\n");
    if s >= p {
        solution.push_str(&format!("{s}-{p}={}\n", s - p));
    }
    solution.push_str(&format!("= {}", s % p));
    Instance { prompt: format!("{a}+{b} mod {p}\n"), answer: (s % p).to_string(), solution, difficulty }
}

fn multi_add(a: u64, b: u64, difficulty: usize) -> Instance {
    let (da, db) = (digits_of(a), digits_of(b));
    let mut carry = 0;
    let mut solution = String::new();
    for i in 0..da.len().max(db.len()) {
        let (x, y) = (da.get(i).copied().unwrap_or(0), db.get(i).copied().unwrap_or(0));
        let s = x + y + carry;
        if carry > 0 {
            solution.push_str(&format!("{x}+{y}+{carry}={s}\n"));
        } else {
            solution.push_str(&format!("{x}+{y}={s}\n"));
        }
        carry = s / 10;
    }
    solution.push_str(&format!("= {}", a + b));
    Instance { prompt: format!("{a}+{b}\n"), answer: (a + b).to_string(), solution, difficulty }
}

fn list_max(xs: &[u32], difficulty: usize) -> Instance {
    let list: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    let mut best = xs[0];
    let mut solution = String::new();
    for &x in &xs[1..] {
        let next = best.max(x);
        solution.push_str(&format!("{best},{x}={next}\n"));
        best = next;
    }
    solution.push_str(&format!("= {best}"));
    Instance { prompt: format!("max[{}]\n", list.join(",")), answer: best.to_string(), solution, difficulty }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::ModAdd { modulus } if !(11..=999).contains(&modulus) => {
                Err(Error::Config(format!("modulus {modulus} outside 11..=999")))
            }
            TaskKind::MultiDigitAdd { max_digits } if !(1..=6).contains(&max_digits) => {
                Err(Error::Config(format!("max_digits {max_digits} outside 1..=6")))
            }
            TaskKind::ListMax { max_len, max_value } if max_len < 2 || max_len > 12 || max_value == 0 => {
                Err(Error::Config("list_max needs 2 ≤ max_len ≤ 12 and max_value ≥ 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of difficulty strata.
    pub fn strata(&self) -> usize {
        match self.kind {
            TaskKind::ModAdd { .. } => 4,
            TaskKind::MultiDigitAdd { max_digits } => max_digits as usize,
            TaskKind::ListMax { max_len, .. } => max_len - 1,
        }
    }

    /// Draws one instance of the given stratum.
    ///
    /// Modular addition strata: both operands one digit; exactly one; both
    /// multi-digit without wrap-around; both multi-digit with wrap-around.
    /// Addition strata are operand digit counts; list strata are lengths.
    pub fn sample(&self, difficulty: usize, rng: &mut impl Rng) -> Instance {
        match self.kind {
            TaskKind::ModAdd { modulus: p } => loop {
                let a = rng.gen_range(0..p);
                let b = rng.gen_range(0..p);
                let small = (a < 10) as usize + (b < 10) as usize;
                let level = match small {
                    2 => 0,
                    1 => 1,
                    _ if a + b < p => 2,
                    _ => 3,
                };
                if level == difficulty {
                    return mod_add(a, b, p, difficulty);
                }
            },
            TaskKind::MultiDigitAdd { .. } => {
                let d = difficulty as u32 + 1;
                let lo = if d == 1 { 0 } else { 10u64.pow(d - 1) };
                let a = rng.gen_range(lo..10u64.pow(d));
                let b = rng.gen_range(0..10u64.pow(d));
                multi_add(a, b, difficulty)
            }
            TaskKind::ListMax { max_value, .. } => {
                let len = difficulty + 2;
                let xs: Vec<u32> = (0..len).map(|_| rng.gen_range(0..=max_value)).collect();
                list_max(&xs, difficulty)
            }
        }
    }

    fn stratified(&self, n: usize, stream_id: u64, exclude: &BTreeSet<String>) -> Vec<Instance> {
        let mut rng = stream(self.seed, stream_id);
        let strata = self.strata();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let level = i % strata;
            // bounded retries keep tiny task spaces from looping forever
            let mut inst = self.sample(level, &mut rng);
            for _ in 0..64 {
                if !exclude.contains(&inst.prompt) {
                    break;
                }
                inst = self.sample(level, &mut rng);
            }
            out.push(inst);
        }
        out
    }

    /// `n_train` instances, evenly spread over difficulty strata.
    pub fn train_set(&self) -> Vec<Instance> {
        self.stratified(self.n_train, 1, &BTreeSet::new())
    }

    /// `n_eval` stratified instances whose prompts avoid the training set.
    pub fn eval_set(&self) -> Vec<Instance> {
        let train: BTreeSet<String> = self.train_set().into_iter().map(|i| i.prompt).collect();
        self.stratified(self.n_eval, 2, &train)
    }

    /// Fresh instances for supervised pretraining, from a separate stream.
    pub fn pretrain_sampler(&self) -> impl FnMut() -> Instance + '_ {
        let mut rng = stream(self.seed, 3);
        let strata = self.strata();
        let mut i = 0usize;
        move || {
            i += 1;
            self.sample(i % strata, &mut rng)
        }
    }

    /// Longest prompt plus solution plus end token across all strata.
    pub fn max_sequence_len(&self) -> usize {
        // operands at their largest digit counts give the longest text
        let worst = match self.kind {
            TaskKind::ModAdd { modulus } => mod_add(modulus - 1, modulus - 1, modulus, 3),
            TaskKind::MultiDigitAdd { max_digits } => {
                let m = 10u64.pow(max_digits) - 1;
                multi_add(m, m, 0)
            }
            TaskKind::ListMax { max_len, max_value } => list_max(&vec![max_value; max_len], 0),
        };
        worst.training_tokens().0.len()
    }
}

/// 1 if the answer extracted from `response` equals the instance's answer.
pub fn verifiable_reward(instance: &Instance, response: &str) -> f64 {
    match extract_answer(response) {
        Some(a) if a == instance.answer => 1.0,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solutions_have_expected_shape() {
        assert_eq!(mod_add(17, 25, 97, 2).solution, "17+25=42\n= 42");
        assert_eq!(mod_add(60, 50, 97, 3).solution, "60+50=110\n110-97=13\n= 13");
        assert_eq!(multi_add(47, 38, 1).solution, "7+8=15\n4+3+1=8\n= 85");
        assert_eq!(list_max(&[3, 9, 4], 1).solution, "3,9=9\n9,4=9\n= 9");
        assert_eq!(mod_add(17, 25, 97, 2).prompt, "17+25 mod 97\n");
    }

    #[test]
    fn rewards_follow_exact_match() {
        let inst = mod_add(17, 25, 97, 2);
        assert_eq!(verifiable_reward(&inst, "17+25=42\n= 42"), 1.0);
        assert_eq!(verifiable_reward(&inst, "17+25=43\n= 43"), 0.0);
        assert_eq!(verifiable_reward(&inst, "17+25"), 0.0);
    }

    #[test]
    fn sets_are_stratified_reproducible_and_fit() {
        for kind in [
            TaskKind::ModAdd { modulus: 97 },
            TaskKind::MultiDigitAdd { max_digits: 4 },
            TaskKind::ListMax { max_len: 5, max_value: 99 },
        ] {
            let spec = TaskSpec { kind, ..Default::default() };
            spec.validate().unwrap();
            let a = spec.train_set();
            assert_eq!(a, spec.train_set());
            assert_eq!(a.len(), 400);
            for level in 0..spec.strata() {
                let n = a.iter().filter(|i| i.difficulty == level).count();
                assert_eq!(n, 400 / spec.strata());
            }
            let train: BTreeSet<_> = a.iter().map(|i| i.prompt.clone()).collect();
            let eval = spec.eval_set();
            assert!(eval.iter().filter(|i| train.contains(&i.prompt)).count() <= 2);
            for inst in a.iter().chain(&eval) {
                let (toks, _) = inst.training_tokens();
                assert!(toks.len() <= spec.max_sequence_len(), "{inst:?}");
                assert_eq!(verifiable_reward(inst, &inst.solution), 1.0);
            }
        }
    }
}
