//! Default prompt texts for the multi-step pipelines and the abstractive
//! refiner. Every template here can be overridden from config.

pub const SELF_ASK_OPENER: &str = "Are follow up questions needed here:";
pub const SELF_ASK_FOLLOW_UP: &str = "Follow up:";
pub const SELF_ASK_INTERMEDIATE: &str = "Intermediate answer:";
pub const SELF_ASK_FINAL: &str = "So the final answer is:";

pub const SELF_ASK_EXAMPLES: &str = "Question: Who lived longer, Muhammad Ali or Alan Turing?
Are follow up questions needed here: Yes.
Follow up: How old was Muhammad Ali when he died?
Intermediate answer: Muhammad Ali was 74 years old when he died.
Follow up: How old was Alan Turing when he died?
Intermediate answer: Alan Turing was 41 years old when he died.
So the final answer is: Muhammad Ali

Question: When was the founder of craigslist born?
Are follow up questions needed here: Yes.
Follow up: Who was the founder of craigslist?
Intermediate answer: Craigslist was founded by Craig Newmark.
Follow up: When was Craig Newmark born?
Intermediate answer: Craig Newmark was born on December 6, 1952.
So the final answer is: December 6, 1952";

pub const SURE_CANDIDATE_MARKER: &str = "Candidate answer:";
pub const SURE_SUMMARY_TEMPLATE: &str = "Passages:
{passages}

Question: {question}
Candidate answer: {candidate}
Summarize the passages in a few sentences, focusing on the evidence that supports the candidate answer to the question.";

pub const SURE_RANK_MARKER: &str = "Which summary better supports";
pub const SURE_RANK_TEMPLATE: &str = "Question: {question}

Summary 1: {summary_1}

Summary 2: {summary_2}

Which summary better supports its answer to the question? Reply with 1 or 2 only.";

pub const ABSTRACTIVE_MARKER: &str = "Summarize the following passages to answer the question";
pub const ABSTRACTIVE_TEMPLATE: &str = "Summarize the following passages to answer the question. Keep only the information needed.

Question: {question}

Passages:
{passages}";
