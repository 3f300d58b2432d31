use super::{BranchSummary, Candidate, Extras, Pipeline, PipelineError, Recorder};
use crate::evaluate::normalize_answer;
use crate::generate::{build_prompt, score_sequence, Message};
use crate::retrieval::RetrievedPassage;

/// Softmax with max-subtraction. Empty input gives an empty vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let Some(max) = scores.iter().copied().reduce(f64::max) else {
        return Vec::new();
    };
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value. Values within a relative 1e-12 of the best so
/// far count as ties and keep the earlier index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if v - values[b] > 1e-12 * values[b].abs().max(f64::MIN_POSITIVE) => best = Some(i),
            _ => {}
        }
    }
    best
}

fn candidate_key(answer: &str) -> String {
    normalize_answer(answer).join(" ")
}

struct Branch {
    prompt: Vec<Message>,
    answer: String,
}

impl Pipeline {
    /// One single-passage generation per passage, in rank order.
    fn branch_candidates(
        &self,
        question: &str,
        passages: &[RetrievedPassage],
        limit: usize,
        rec: &mut Recorder,
    ) -> Result<Vec<Branch>, PipelineError> {
        let mut out = Vec::new();
        for (d, p) in passages.iter().take(limit).enumerate() {
            let prompt = build_prompt(question, std::slice::from_ref(p), &self.cfg.prompt)?;
            let gen = self.generate_step(
                prompt.clone(),
                &self.cfg.generation,
                Some(format!("candidate {}", d + 1)),
                rec,
            )?;
            out.push(Branch {
                prompt,
                answer: gen.text.trim().to_string(),
            });
        }
        Ok(out)
    }

    /// Keeps the first of candidates whose normalized text coincides.
    fn dedupe(answers: impl IntoIterator<Item = String>) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        answers
            .into_iter()
            .filter(|a| seen.insert(candidate_key(a)))
            .collect()
    }

    /// Weighted by softmax of retrieval scores, each candidate's score sums
    /// the length-normalized sequence probability under every passage prompt.
    pub(super) fn replug(&self, question: &str, rec: &mut Recorder, extras: &mut Extras) -> Result<String, PipelineError> {
        let passages = self.retrieve_step(question, self.cfg.top_k, rec)?;
        if passages.is_empty() {
            return self.naive(question, rec);
        }
        let weights = softmax(&passages.iter().map(|p| p.score).collect::<Vec<_>>());
        let limit = self.cfg.replug_candidates.unwrap_or(passages.len());
        let branches = self.branch_candidates(question, &passages, limit, rec)?;
        let prompts: Vec<Vec<Message>> = passages
            .iter()
            .enumerate()
            .map(|(d, p)| match branches.get(d) {
                Some(b) => Ok(b.prompt.clone()),
                None => build_prompt(question, std::slice::from_ref(p), &self.cfg.prompt),
            })
            .collect::<Result<_, _>>()?;
        let candidates = Self::dedupe(branches.into_iter().map(|b| b.answer));
        let gen = self.comps.generator.as_ref();
        let mut scored = Vec::with_capacity(candidates.len());
        for c in candidates {
            let mut total = 0.0;
            if !c.is_empty() {
                for (prompt, w) in prompts.iter().zip(&weights) {
                    let s = score_sequence(gen, prompt, &c)?;
                    if s.token_count > 0 {
                        total += w * (s.total_logprob / s.token_count as f64).exp();
                    }
                }
            }
            scored.push(Candidate { answer: c, score: total });
        }
        let winner = argmax_first(&scored.iter().map(|c| c.score).collect::<Vec<_>>()).unwrap_or(0);
        let answer = scored[winner].answer.clone();
        extras.branch = Some(BranchSummary {
            weights,
            candidates: scored,
            winner,
        });
        Ok(answer)
    }

    /// Candidates per passage, a supporting summary per candidate, then
    /// pairwise votes between summaries.
    pub(super) fn sure(&self, question: &str, rec: &mut Recorder, extras: &mut Extras) -> Result<String, PipelineError> {
        let passages = self.retrieve_step(question, self.cfg.top_k, rec)?;
        if passages.is_empty() {
            return self.naive(question, rec);
        }
        let branches = self.branch_candidates(question, &passages, passages.len(), rec)?;
        let candidates = Self::dedupe(branches.into_iter().map(|b| b.answer));
        if candidates.len() == 1 {
            let answer = candidates[0].clone();
            extras.branch = Some(BranchSummary {
                weights: Vec::new(),
                candidates: vec![Candidate {
                    answer: answer.clone(),
                    score: 0.0,
                }],
                winner: 0,
            });
            return Ok(answer);
        }
        let listing = self.cfg.prompt.format_passages(&passages);
        let t = &self.cfg.templates;
        let mut summaries = Vec::with_capacity(candidates.len());
        for (i, c) in candidates.iter().enumerate() {
            let prompt = t
                .sure_summary
                .replace("{passages}", &listing)
                .replace("{question}", question)
                .replace("{candidate}", c);
            let out = self.generate_step(
                vec![Message::user(prompt)],
                &self.cfg.generation,
                Some(format!("summary {}", i + 1)),
                rec,
            )?;
            summaries.push(out.text.trim().to_string());
        }
        let mut votes = vec![0usize; candidates.len()];
        for i in 0..candidates.len() {
            for j in i + 1..candidates.len() {
                let prompt = t
                    .sure_rank
                    .replace("{question}", question)
                    .replace("{summary_1}", &summaries[i])
                    .replace("{summary_2}", &summaries[j]);
                let out = self.generate_step(
                    vec![Message::user(prompt)],
                    &self.cfg.generation,
                    Some(format!("rank {} vs {}", i + 1, j + 1)),
                    rec,
                )?;
                match out.text.chars().find(|c| *c == '1' || *c == '2') {
                    Some('1') => votes[i] += 1,
                    Some(_) => votes[j] += 1,
                    None => log::warn!("unparseable ranking response {:?}; vote discarded", out.text),
                }
            }
        }
        let scores: Vec<f64> = votes.iter().map(|&v| v as f64).collect();
        let winner = argmax_first(&scores).unwrap_or(0);
        let answer = candidates[winner].clone();
        extras.branch = Some(BranchSummary {
            weights: Vec::new(),
            candidates: candidates
                .into_iter()
                .zip(scores)
                .map(|(answer, score)| Candidate { answer, score })
                .collect(),
            winner,
        });
        Ok(answer)
    }
}
