//! Plain-text MDP serialization.
//!
//! Layout:
//!
//! ```text
//! MDP <n_states> <n_actions> <gamma>
//! T <s> <a>
//! <p(0) p(1) ... p(n_states-1)>          (one block per state/action pair)
//! R
//! <n_states rows of n_actions rewards>
//! TERM
//! <n_states 0/1 flags>
//! PERT
//! <one line per state: the members of B(s), unperturbed state first>
//! ```
//!
//! Floats are written with 17 significant digits so every f64 round-trips
//! exactly. The format does not carry an initial distribution; loading
//! defaults to uniform over non-terminal states, which `save_mdp` documents
//! by simply not writing one. Parse and consistency errors carry the
//! offending line number.
//!
//! Deterministic policies use a companion format:
//!
//! ```text
//! POLICY <n_states> <n_actions>
//! <action indices, whitespace separated, n_states of them>
//! ```

use super::{DeterministicPolicy, TabularMDP, TabularPerturbation, PROB_TOL};
use crate::error::CoreError;
use crate::Result;
use std::fmt::Write as _;
use std::path::Path;

/// Serializes an MDP and its perturbation model to `path`.
///
/// The initial distribution is not part of the format; see the module docs.
pub fn save_mdp(path: &Path, mdp: &TabularMDP, perturb: &TabularPerturbation) -> Result<()> {
    mdp.validate()?;
    perturb.validate(mdp.n_states)?;
    let mut out = String::new();
    let _ = writeln!(out, "MDP {} {} {}", mdp.n_states, mdp.n_actions, fmt_f64(mdp.gamma));
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let _ = writeln!(out, "T {s} {a}");
            let row: Vec<String> = mdp.transition[s][a].iter().map(|&p| fmt_f64(p)).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    let _ = writeln!(out, "R");
    for s in 0..mdp.n_states {
        let row: Vec<String> = mdp.reward[s].iter().map(|&r| fmt_f64(r)).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    let _ = writeln!(out, "TERM");
    let flags: Vec<&str> = mdp.terminal.iter().map(|&t| if t { "1" } else { "0" }).collect();
    let _ = writeln!(out, "{}", flags.join(" "));
    let _ = writeln!(out, "PERT");
    for set in &perturb.admissible {
        let row: Vec<String> = set.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses an MDP file written by [`save_mdp`] (or by hand).
///
/// The initial distribution is set to uniform over non-terminal states.
pub fn load_mdp(path: &Path) -> Result<(TabularMDP, TabularPerturbation)> {
    let text = std::fs::read_to_string(path)?;
    let pathstr = path.display().to_string();
    let mut lines = Cursor::new(&pathstr, &text);

    // Header.
    let (lineno, header) = lines.next_content()?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 4 || tokens[0] != "MDP" {
        return Err(err(&pathstr, lineno, "expected header `MDP n_states n_actions gamma`"));
    }
    let n_states: usize = parse_tok(&pathstr, lineno, tokens[1], "n_states")?;
    let n_actions: usize = parse_tok(&pathstr, lineno, tokens[2], "n_actions")?;
    let gamma: f64 = parse_f64(&pathstr, lineno, tokens[3])?;
    if n_states == 0 || n_actions == 0 {
        return Err(err(&pathstr, lineno, "n_states and n_actions must be positive"));
    }

    // Transition blocks until the bare `R` line.
    let mut transition = vec![vec![Vec::<f64>::new(); n_actions]; n_states];
    loop {
        let (lineno, line) = lines.next_content()?;
        if line.trim() == "R" {
            break;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 || tokens[0] != "T" {
            return Err(err(&pathstr, lineno, "expected `T s a` or `R`"));
        }
        let s: usize = parse_tok(&pathstr, lineno, tokens[1], "state index")?;
        let a: usize = parse_tok(&pathstr, lineno, tokens[2], "action index")?;
        if s >= n_states {
            return Err(err(&pathstr, lineno, &format!("state index {s} out of range (n_states {n_states})")));
        }
        if a >= n_actions {
            return Err(err(&pathstr, lineno, &format!("action index {a} out of range (n_actions {n_actions})")));
        }
        if !transition[s][a].is_empty() {
            return Err(err(&pathstr, lineno, &format!("duplicate transition block for state {s} action {a}")));
        }
        let (rowno, row_line) = lines.next_content()?;
        let row = parse_f64_row(&pathstr, rowno, row_line, n_states, "probability")?;
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0) {
            return Err(err(&pathstr, rowno, "negative probability"));
        }
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(err(&pathstr, rowno, &format!("probability row sums to {sum}, expected 1")));
        }
        transition[s][a] = row;
    }
    for (s, rows) in transition.iter().enumerate() {
        for (a, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(err(&pathstr, lines.lineno, &format!("missing transition block for state {s} action {a}")));
            }
        }
    }

    // Rewards.
    let mut reward = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let (lineno, line) = lines.next_content()?;
        reward.push(parse_f64_row(&pathstr, lineno, line, n_actions, "reward")?);
    }

    // Terminal flags.
    let (lineno, line) = lines.next_content()?;
    if line.trim() != "TERM" {
        return Err(err(&pathstr, lineno, "expected `TERM`"));
    }
    let (lineno, line) = lines.next_content()?;
    let flags: Vec<&str> = line.split_whitespace().collect();
    if flags.len() != n_states {
        return Err(err(&pathstr, lineno, &format!("expected {n_states} terminal flags, got {}", flags.len())));
    }
    let mut terminal = Vec::with_capacity(n_states);
    for f in flags {
        match f {
            "0" => terminal.push(false),
            "1" => terminal.push(true),
            other => return Err(err(&pathstr, lineno, &format!("terminal flag must be 0 or 1, got `{other}`"))),
        }
    }

    // Perturbation sets.
    let (lineno, line) = lines.next_content()?;
    if line.trim() != "PERT" {
        return Err(err(&pathstr, lineno, "expected `PERT`"));
    }
    let mut admissible = Vec::with_capacity(n_states);
    for s in 0..n_states {
        let (lineno, line) = lines.next_content()?;
        let mut set = Vec::new();
        for tok in line.split_whitespace() {
            let t: usize = parse_tok(&pathstr, lineno, tok, "state index")?;
            if t >= n_states {
                return Err(err(&pathstr, lineno, &format!("B({s}) references out-of-range state {t}")));
            }
            set.push(t);
        }
        if set.first() != Some(&s) {
            return Err(err(&pathstr, lineno, &format!("B({s}) must list state {s} first")));
        }
        admissible.push(set);
    }
    if let Some((lineno, _)) = lines.peek_content() {
        return Err(err(&pathstr, lineno, "trailing content after PERT section"));
    }

    let n_free = terminal.iter().filter(|&&t| !t).count();
    if n_free == 0 {
        return Err(err(&pathstr, lines.lineno, "all states terminal; no valid initial state"));
    }
    let initial_dist: Vec<f64> = terminal
        .iter()
        .map(|&t| if t { 0.0 } else { 1.0 / n_free as f64 })
        .collect();

    let mdp = TabularMDP::new(n_states, n_actions, transition, reward, gamma, initial_dist, terminal)?;
    // The format carries no budget metadata; label the sets as explicit.
    let perturb = TabularPerturbation::new(admissible, 0.0)?;
    Ok((mdp, perturb))
}

/// Serializes a deterministic policy to `path`.
pub fn save_policy(path: &Path, policy: &DeterministicPolicy, n_actions: usize) -> Result<()> {
    if let Some(&a) = policy.action_of.iter().find(|&&a| a >= n_actions) {
        return Err(CoreError::Config(format!("policy action {a} out of range (n_actions {n_actions})")));
    }
    let mut out = String::new();
    let _ = writeln!(out, "POLICY {} {}", policy.n_states(), n_actions);
    let row: Vec<String> = policy.action_of.iter().map(|a| a.to_string()).collect();
    let _ = writeln!(out, "{}", row.join(" "));
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a policy file written by [`save_policy`] (or by hand).
pub fn load_policy(path: &Path) -> Result<DeterministicPolicy> {
    let text = std::fs::read_to_string(path)?;
    let pathstr = path.display().to_string();
    let mut lines = Cursor::new(&pathstr, &text);
    let (lineno, header) = lines.next_content()?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 3 || tokens[0] != "POLICY" {
        return Err(err(&pathstr, lineno, "expected header `POLICY n_states n_actions`"));
    }
    let n_states: usize = parse_tok(&pathstr, lineno, tokens[1], "n_states")?;
    let n_actions: usize = parse_tok(&pathstr, lineno, tokens[2], "n_actions")?;
    let mut action_of = Vec::with_capacity(n_states);
    while action_of.len() < n_states {
        let (lineno, line) = lines.next_content()?;
        for tok in line.split_whitespace() {
            let a: usize = parse_tok(&pathstr, lineno, tok, "action index")?;
            if a >= n_actions {
                return Err(err(&pathstr, lineno, &format!("action {a} out of range (n_actions {n_actions})")));
            }
            action_of.push(a);
        }
        if action_of.len() > n_states {
            return Err(err(&pathstr, lineno, &format!("expected {n_states} actions, got {}", action_of.len())));
        }
    }
    if let Some((lineno, _)) = lines.peek_content() {
        return Err(err(&pathstr, lineno, "trailing content after action list"));
    }
    DeterministicPolicy::new(action_of, n_actions)
}

/// 17-significant-digit float formatting; round-trips every f64 exactly.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn err(path: &str, line: usize, msg: &str) -> CoreError {
    CoreError::format(path, line, msg)
}

fn parse_tok<T: std::str::FromStr>(path: &str, line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| err(path, line, &format!("cannot parse {what} from `{tok}`")))
}

fn parse_f64(path: &str, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = parse_tok(path, line, tok, "number")?;
    if !v.is_finite() {
        return Err(err(path, line, &format!("non-finite number `{tok}`")));
    }
    Ok(v)
}

fn parse_f64_row(path: &str, line: usize, text: &str, expect: usize, what: &str) -> Result<Vec<f64>> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() != expect {
        return Err(err(path, line, &format!("expected {expect} {what} entries, got {}", tokens.len())));
    }
    tokens.iter().map(|t| parse_f64(path, line, t)).collect()
}

/// Line iterator that skips blanks/comments and tracks line numbers.
struct Cursor<'a> {
    path: &'a str,
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    lineno: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a str, text: &'a str) -> Self {
        Cursor { path, lines: text.lines().enumerate().peekable(), lineno: 0 }
    }

    fn skip_blank(&mut self) {
        while let Some((_, line)) = self.lines.peek() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                self.lines.next();
            } else {
                break;
            }
        }
    }

    fn next_content(&mut self) -> Result<(usize, &'a str)> {
        self.skip_blank();
        match self.lines.next() {
            Some((i, line)) => {
                self.lineno = i + 1;
                Ok((i + 1, line))
            }
            None => Err(CoreError::format(self.path, self.lineno + 1, "unexpected end of file")),
        }
    }

    fn peek_content(&mut self) -> Option<(usize, &'a str)> {
        self.skip_blank();
        self.lines.peek().map(|&(i, line)| (i + 1, line))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_chain2, build_gohome};

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("wocar-format-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn chain2_round_trips() {
        let (mdp, pert, _) = build_chain2();
        let path = tmpfile("chain2.mdp");
        save_mdp(&path, &mdp, &pert).unwrap();
        let (loaded, loaded_pert) = load_mdp(&path).unwrap();
        assert_eq!(loaded.transition, mdp.transition);
        assert_eq!(loaded.reward, mdp.reward);
        assert_eq!(loaded.gamma, mdp.gamma);
        assert_eq!(loaded.terminal, mdp.terminal);
        // chain2 has no terminals, so uniform-over-non-terminal matches.
        assert_eq!(loaded.initial_dist, mdp.initial_dist);
        assert_eq!(loaded_pert.admissible, pert.admissible);
    }

    #[test]
    fn file_round_trips_bytewise() {
        let (mdp, pert) = build_gohome(4, 3, (0, 0), (3, 2), (2, 1), &[(1, 1)], 0.15, 1, 0.97).unwrap();
        let p1 = tmpfile("g1.mdp");
        let p2 = tmpfile("g2.mdp");
        save_mdp(&p1, &mdp, &pert).unwrap();
        let (loaded, loaded_pert) = load_mdp(&p1).unwrap();
        save_mdp(&p2, &loaded, &loaded_pert).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // Tensors survive exactly, including the slip probabilities.
        assert_eq!(loaded.transition, mdp.transition);
        assert_eq!(loaded.reward, mdp.reward);
    }

    #[test]
    fn bad_row_sum_reports_line() {
        let path = tmpfile("badsum.mdp");
        std::fs::write(
            &path,
            "MDP 1 1 0.5\nT 0 0\n0.9\nR\n0.0\nTERM\n0\nPERT\n0\n",
        )
        .unwrap();
        let e = load_mdp(&path).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains(":3:"), "expected line 3 in `{msg}`");
        assert!(msg.contains("sums to"), "unexpected message `{msg}`");
    }

    #[test]
    fn dangling_index_reports_line() {
        let path = tmpfile("dangling.mdp");
        std::fs::write(
            &path,
            "MDP 1 1 0.5\nT 1 0\n1.0\nR\n0.0\nTERM\n0\nPERT\n0\n",
        )
        .unwrap();
        let e = load_mdp(&path).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains(":2:") && msg.contains("out of range"), "`{msg}`");
    }

    #[test]
    fn malformed_header_reports_line() {
        let path = tmpfile("badheader.mdp");
        std::fs::write(&path, "MDPX 1 1 0.5\n").unwrap();
        let e = load_mdp(&path).unwrap_err();
        assert!(e.to_string().contains(":1:"), "`{e}`");
    }

    #[test]
    fn pert_must_anchor_each_set() {
        let path = tmpfile("badpert.mdp");
        std::fs::write(
            &path,
            "MDP 2 1 0.5\nT 0 0\n1.0 0.0\nT 1 0\n0.0 1.0\nR\n0.0\n0.0\nTERM\n0 0\nPERT\n1 0\n1\n",
        )
        .unwrap();
        let e = load_mdp(&path).unwrap_err();
        assert!(e.to_string().contains("must list state 0 first"), "`{e}`");
    }

    #[test]
    fn policy_round_trips_and_validates() {
        let (_, _, policy) = build_chain2();
        let path = tmpfile("chain2.policy");
        save_policy(&path, &policy, 2).unwrap();
        let loaded = load_policy(&path).unwrap();
        assert_eq!(loaded.action_of, policy.action_of);

        let bad = tmpfile("bad.policy");
        std::fs::write(&bad, "POLICY 2 2\n0 5\n").unwrap();
        assert!(load_policy(&bad).unwrap_err().to_string().contains("out of range"));
        std::fs::write(&bad, "POLICY 2 2\n0 1 0\n").unwrap();
        assert!(load_policy(&bad).is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let path = tmpfile("comments.mdp");
        std::fs::write(
            &path,
            "# tiny self-loop\n\nMDP 1 1 0.0\nT 0 0\n1.0\n\nR\n0.25\nTERM\n0\nPERT\n0\n",
        )
        .unwrap();
        let (mdp, _) = load_mdp(&path).unwrap();
        assert_eq!(mdp.reward[0][0], 0.25);
        assert_eq!(mdp.gamma, 0.0);
    }
}
