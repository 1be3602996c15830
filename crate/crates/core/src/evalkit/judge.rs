use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::content_id;

/// Scoring prompt with `{title}`, `{abstract}`, `{ground_truth}` and
/// `{generated_text}` slots.
pub const JUDGE_PROMPT: &str = include_str!("../../assets/judge_prompt.txt");

const DIMENSIONS: [&str; 5] = ["Relevance", "Coherence", "Academic", "Completeness", "Innovation"];

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge input field {0} is empty")]
    EmptyInput(&'static str),
    #[error("credential variable {0} is not set")]
    Credential(String),
    #[error("judge request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("malformed score block ({reason}): {raw:?}")]
    Parse { reason: String, raw: String },
    #[error("judge cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub relevance: u8,
    pub coherence: u8,
    pub academic: u8,
    pub completeness: u8,
    pub innovation: u8,
    pub total: u32,
}

impl JudgeScores {
    pub fn components(&self) -> [u8; 5] {
        [self.relevance, self.coherence, self.academic, self.completeness, self.innovation]
    }

    pub fn from_components(c: [u8; 5]) -> Self {
        Self {
            relevance: c[0],
            coherence: c[1],
            academic: c[2],
            completeness: c[3],
            innovation: c[4],
            total: c.iter().map(|&x| u32::from(x)).sum(),
        }
    }

    /// The score block in the grammar the prompt requests.
    pub fn to_block(&self) -> String {
        let mut out = String::from("[Scores]\n");
        for (name, v) in DIMENSIONS.iter().zip(self.components()) {
            out.push_str(&format!("{name}: {v}/5\n"));
        }
        out.push_str(&format!("Total: {}/25\n[End Scores]", self.total));
        out
    }
}

/// Parsed scores plus any consistency warning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedScores {
    /// `total` is always the recomputed component sum.
    pub scores: JudgeScores,
    pub stated_total: u32,
    pub warning: Option<String>,
}

fn parse_fraction(value: &str, denom: u32) -> Option<u32> {
    let (num, den) = value.trim().split_once('/')?;
    let den: u32 = den.trim().parse().ok()?;
    (den == denom).then_some(())?;
    num.trim().parse().ok()
}

/// Parses the `[Scores] … [End Scores]` block out of a judge response.
pub fn parse_scores(response: &str) -> Result<ParsedScores, JudgeError> {
    let err = |reason: &str, raw: &str| JudgeError::Parse { reason: reason.to_string(), raw: raw.to_string() };
    let start = response.rfind("[Scores]").ok_or_else(|| err("missing [Scores]", response))?;
    let rest = &response[start + "[Scores]".len()..];
    let end = rest.find("[End Scores]").ok_or_else(|| err("missing [End Scores]", &response[start..]))?;
    let block = &rest[..end];
    let raw = &response[start..start + "[Scores]".len() + end + "[End Scores]".len()];

    let mut comps: [Option<u8>; 5] = [None; 5];
    let mut total = None;
    for line in block.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (name, value) = line.split_once(':').ok_or_else(|| err(&format!("unreadable line {line:?}"), raw))?;
        let name = name.trim();
        if name.eq_ignore_ascii_case("Total") {
            total = Some(parse_fraction(value, 25).ok_or_else(|| err("bad total", raw))?);
            continue;
        }
        let slot = DIMENSIONS
            .iter()
            .position(|d| d.eq_ignore_ascii_case(name))
            .ok_or_else(|| err(&format!("unknown dimension {name:?}"), raw))?;
        let v = parse_fraction(value, 5).ok_or_else(|| err(&format!("bad score for {name}"), raw))?;
        if !(1..=5).contains(&v) {
            return Err(err(&format!("{name} score {v} outside 1..5"), raw));
        }
        if comps[slot].replace(v as u8).is_some() {
            return Err(err(&format!("{name} given twice"), raw));
        }
    }
    let mut c = [0u8; 5];
    for (i, v) in comps.iter().enumerate() {
        c[i] = v.ok_or_else(|| err(&format!("missing {}", DIMENSIONS[i]), raw))?;
    }
    let stated_total = total.ok_or_else(|| err("missing Total", raw))?;
    let scores = JudgeScores::from_components(c);
    let warning = (stated_total != scores.total)
        .then(|| format!("stated total {stated_total} differs from component sum {}; using the sum", scores.total));
    Ok(ParsedScores { scores, stated_total, warning })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeInput {
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub ground_truth: String,
    pub generated: String,
}

pub fn render_prompt(input: &JudgeInput) -> Result<String, JudgeError> {
    for (name, v) in [
        ("title", &input.title),
        ("abstract", &input.abstract_text),
        ("ground_truth", &input.ground_truth),
        ("generated_text", &input.generated),
    ] {
        if v.trim().is_empty() {
            return Err(JudgeError::EmptyInput(name));
        }
    }
    // Single pass so slot-like text inside a fill is never substituted again.
    let fills = [
        ("{title}", input.title.as_str()),
        ("{abstract}", input.abstract_text.as_str()),
        ("{ground_truth}", input.ground_truth.as_str()),
        ("{generated_text}", input.generated.as_str()),
    ];
    let mut out = String::with_capacity(JUDGE_PROMPT.len() + 256);
    let mut rest = JUDGE_PROMPT;
    'scan: while let Some(i) = rest.find('{') {
        for (slot, fill) in fills {
            if rest[i..].starts_with(slot) {
                out.push_str(&rest[..i]);
                out.push_str(fill);
                rest = &rest[i + slot.len()..];
                continue 'scan;
            }
        }
        out.push_str(&rest[..=i]);
        rest = &rest[i + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    /// Chat-completion URL that receives the POST.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer credential.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub max_concurrent: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: "JUDGE_API_KEY".into(),
            timeout_secs: 120,
            max_retries: 2,
            max_concurrent: 2,
            cache_dir: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Transcript {
    model: String,
    prompt: String,
    response: String,
}

pub struct JudgeClient {
    config: JudgeConfig,
    agent: ureq::Agent,
}

impl JudgeClient {
    pub fn new(config: JudgeConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.config
    }

    fn credential(&self) -> Result<String, JudgeError> {
        std::env::var(&self.config.api_key_env).map_err(|_| JudgeError::Credential(self.config.api_key_env.clone()))
    }

    fn cache_path(&self, prompt: &str) -> Option<PathBuf> {
        let key = content_id(format!("{}\n{prompt}", self.config.model).as_bytes());
        self.config.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    /// Sends the prompt, returning the assistant message text.
    pub fn complete(&self, prompt: &str) -> Result<String, JudgeError> {
        let cache = self.cache_path(prompt);
        if let Some(p) = &cache {
            if let Ok(text) = fs::read_to_string(p) {
                if let Ok(t) = serde_json::from_str::<Transcript>(&text) {
                    return Ok(t.response);
                }
            }
        }
        let key = self.credential()?;
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut last = String::new();
        let attempts = self.config.max_retries + 1;
        for attempt in 1..=attempts {
            match self.post(&body, &key) {
                Ok(text) => {
                    if let Some(p) = &cache {
                        if let Some(dir) = p.parent() {
                            fs::create_dir_all(dir)?;
                        }
                        let t = Transcript {
                            model: self.config.model.clone(),
                            prompt: prompt.to_string(),
                            response: text.clone(),
                        };
                        crate::model::write_atomic(p, serde_json::to_string_pretty(&t).expect("plain").as_bytes())?;
                    }
                    return Ok(text);
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(m)) => {
                    last = m;
                    if attempt < attempts {
                        std::thread::sleep(Duration::from_millis(100 * attempt as u64));
                    }
                }
            }
        }
        Err(JudgeError::Transport { attempts, message: last })
    }

    fn post(&self, body: &serde_json::Value, key: &str) -> Result<String, Failure> {
        let resp =
            self.agent.post(&self.config.endpoint).header("Authorization", &format!("Bearer {key}")).send_json(body);
        let mut resp = resp.map_err(|e| Failure::Retry(e.to_string()))?;
        let value: serde_json::Value =
            resp.body_mut().read_json().map_err(|e| Failure::Retry(format!("unreadable response body: {e}")))?;
        value["choices"][0]["message"]["content"].as_str().map(str::to_string).ok_or_else(|| {
            Failure::Fatal(JudgeError::Parse {
                reason: "response has no choices[0].message.content".into(),
                raw: value.to_string(),
            })
        })
    }

    pub fn judge(&self, input: &JudgeInput) -> Result<ParsedScores, JudgeError> {
        let prompt = render_prompt(input)?;
        parse_scores(&self.complete(&prompt)?)
    }

    /// Judges every input with at most `max_concurrent` requests in flight.
    /// Results keep input order.
    pub fn judge_all(&self, inputs: &[JudgeInput]) -> Vec<Result<ParsedScores, JudgeError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<ParsedScores, JudgeError>>>> =
            inputs.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.max_concurrent.clamp(1, inputs.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= inputs.len() {
                        break;
                    }
                    let r = self.judge(&inputs[i]);
                    *slots[i].lock().expect("slot") = Some(r);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().expect("slot").expect("every slot filled")).collect()
    }
}

enum Failure {
    Retry(String),
    Fatal(JudgeError),
}
