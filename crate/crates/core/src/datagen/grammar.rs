//! Context-free grammars with finite languages: exact sentence counting,
//! uniform sampling over sentences, and a chart recognizer.

use rand::Rng;

use crate::error::{Error, Result};

/// Grammar of the synthetic repair benchmark. Terminals are the numbers
/// `1..=23`; `1` and `2` delimit every sentence.
pub const BENCHMARK_GRAMMAR: &str = "
S: SOS NP VP EOS
SOS: '1'
EOS: '2'
NP: Det Nom | PropN
Nom: Adj N | N
VP: V NP | V NP PP
PP: P NP
PropN: '3' | '4' | '5'
Det: '6' | '7'
N: '8' | '9' | '10' | '11' | '12'
Adj: '13' | '14' | '15' | '16' | '17'
V: '18' | '19' | '20' | '21'
P: '22' | '23'
";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Symbol {
    Terminal(u32),
    Nonterminal(usize),
}

#[derive(Clone, Debug)]
pub struct Grammar {
    names: Vec<String>,
    rules: Vec<Vec<Vec<Symbol>>>,
    start: usize,
}

impl Grammar {
    /// The fixed benchmark grammar.
    pub fn benchmark() -> Self {
        Self::parse(BENCHMARK_GRAMMAR).expect("benchmark grammar parses")
    }

    /// Parses `Name: a b | 'c' d` lines; the first rule's head is the start
    /// symbol, quoted tokens are terminals (decimal numbers).
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<(&str, &str)> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once(':')
                    .map(|(h, b)| (h.trim(), b.trim()))
                    .ok_or_else(|| Error::Config(format!("grammar line without ':': {l}")))
            })
            .collect::<Result<_>>()?;
        if lines.is_empty() {
            return Err(Error::Config("empty grammar".into()));
        }
        let names: Vec<String> = lines.iter().map(|(h, _)| h.to_string()).collect();
        let lookup = |name: &str| names.iter().position(|n| n == name);
        let mut rules = Vec::with_capacity(lines.len());
        for (head, body) in &lines {
            let mut alts = Vec::new();
            for alt in body.split('|') {
                let mut syms = Vec::new();
                for tok in alt.split_whitespace() {
                    if let Some(t) = tok.strip_prefix('\'').and_then(|t| t.strip_suffix('\'')) {
                        let v = t
                            .parse()
                            .map_err(|_| Error::Config(format!("terminal {tok} is not a number")))?;
                        syms.push(Symbol::Terminal(v));
                    } else {
                        let nt = lookup(tok).ok_or_else(|| {
                            Error::Config(format!("rule {head} uses undefined symbol {tok}"))
                        })?;
                        syms.push(Symbol::Nonterminal(nt));
                    }
                }
                if syms.is_empty() {
                    return Err(Error::UnsupportedGrammar(format!(
                        "rule {head} has an empty alternative"
                    )));
                }
                alts.push(syms);
            }
            rules.push(alts);
        }
        Ok(Self {
            names,
            rules,
            start: 0,
        })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn nonterminal(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, nt: usize) -> &str {
        &self.names[nt]
    }

    pub fn nonterminal_count(&self) -> usize {
        self.names.len()
    }

    pub fn alternatives(&self, nt: usize) -> &[Vec<Symbol>] {
        &self.rules[nt]
    }

    /// Distinct terminals in first-appearance order sorted ascending.
    pub fn terminals(&self) -> Vec<u32> {
        let mut ts: Vec<u32> = self
            .rules
            .iter()
            .flatten()
            .flatten()
            .filter_map(|s| match s {
                Symbol::Terminal(t) => Some(*t),
                Symbol::Nonterminal(_) => None,
            })
            .collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    }

    fn has_cycle(&self) -> bool {
        // 0 = unvisited, 1 = on stack, 2 = done
        fn visit(g: &Grammar, nt: usize, state: &mut [u8]) -> bool {
            state[nt] = 1;
            for sym in g.rules[nt].iter().flatten() {
                if let Symbol::Nonterminal(next) = *sym {
                    let seen = state[next];
                    if seen == 1 || (seen == 0 && visit(g, next, state)) {
                        return true;
                    }
                }
            }
            state[nt] = 2;
            false
        }
        let mut state = vec![0u8; self.names.len()];
        (0..self.names.len()).any(|nt| state[nt] == 0 && visit(self, nt, &mut state))
    }
}

/// Sentence counts per nonterminal and length, for lengths `< max_len`.
#[derive(Clone, Debug)]
pub struct LanguageCounts {
    max_len: usize,
    /// `by_len[nt][n]` = number of distinct derivations of length `n`.
    by_len: Vec<Vec<u64>>,
    /// `suffix[nt][alt][pos][n]` = derivations of `alt[pos..]` with length `n`.
    suffix: Vec<Vec<Vec<Vec<u64>>>>,
}

impl LanguageCounts {
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Sentences of `nt` with length `n`.
    pub fn count_at(&self, nt: usize, n: usize) -> u64 {
        self.by_len[nt].get(n).copied().unwrap_or(0)
    }

    /// All sentences of `nt` shorter than `max_len`.
    pub fn count(&self, nt: usize) -> u64 {
        self.by_len[nt].iter().sum()
    }

    pub fn lengths(&self, nt: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.by_len[nt]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(n, &c)| (n, c))
    }
}

/// Counts every nonterminal's sentences shorter than `max_len` by bottom-up
/// derivation counting over lengths.
///
/// Derivation counts equal distinct-string counts for unambiguous grammars;
/// the benchmark grammar is unambiguous (checked against brute-force
/// enumeration in the tests). Grammars with recursive rules are rejected
/// since their languages may be infinite.
pub fn count_cfg_sentences(grammar: &Grammar, max_len: usize) -> Result<LanguageCounts> {
    if grammar.has_cycle() {
        return Err(Error::UnsupportedGrammar(
            "recursive rules make the language infinite".into(),
        ));
    }
    let nts = grammar.nonterminal_count();
    let mut by_len = vec![vec![0u64; max_len]; nts];
    let mut suffix: Vec<Vec<Vec<Vec<u64>>>> = grammar
        .rules
        .iter()
        .map(|alts| {
            alts.iter()
                .map(|a| vec![vec![0u64; max_len]; a.len() + 1])
                .collect()
        })
        .collect();
    // Acyclic, so resolving in dependency order is a fixed point after at
    // most `nts` sweeps per length.
    for n in 1..max_len {
        for _ in 0..=nts {
            let mut changed = false;
            for nt in 0..nts {
                let mut total = 0u64;
                for (ai, alt) in grammar.rules[nt].iter().enumerate() {
                    let k = alt.len();
                    // suffix[.., k][m] = [m == 0]
                    for pos in (0..k).rev() {
                        let mut c = 0u64;
                        for first in 1..=n {
                            let head = match alt[pos] {
                                Symbol::Terminal(_) => u64::from(first == 1),
                                Symbol::Nonterminal(b) => by_len[b][first],
                            };
                            if head == 0 {
                                continue;
                            }
                            let rest_len = n - first;
                            let rest = if pos + 1 == k {
                                u64::from(rest_len == 0)
                            } else {
                                suffix[nt][ai][pos + 1][rest_len]
                            };
                            c = c.saturating_add(head.saturating_mul(rest));
                        }
                        suffix[nt][ai][pos][n] = c;
                    }
                    total = total.saturating_add(suffix[nt][ai][0][n]);
                }
                if by_len[nt][n] != total {
                    by_len[nt][n] = total;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
    Ok(LanguageCounts {
        max_len,
        by_len,
        suffix,
    })
}

fn pick_weighted<R: Rng + ?Sized>(rng: &mut R, weights: impl Iterator<Item = u64> + Clone) -> usize {
    let total: u64 = weights.clone().sum();
    let mut r = rng.random_range(0..total);
    for (i, w) in weights.enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    unreachable!("weights sum to total")
}

fn sample_nt<R: Rng + ?Sized>(
    g: &Grammar,
    counts: &LanguageCounts,
    rng: &mut R,
    nt: usize,
    n: usize,
    out: &mut Vec<u32>,
) {
    let alts = &g.rules[nt];
    let ai = pick_weighted(rng, (0..alts.len()).map(|a| counts.suffix[nt][a][0][n]));
    let alt = &alts[ai];
    let mut remaining = n;
    for pos in 0..alt.len() {
        let last = pos + 1 == alt.len();
        let weight = |first: usize| -> u64 {
            let head = match alt[pos] {
                Symbol::Terminal(_) => u64::from(first == 1),
                Symbol::Nonterminal(b) => counts.by_len[b][first],
            };
            let rest = remaining - first;
            let tail = if last {
                u64::from(rest == 0)
            } else {
                counts.suffix[nt][ai][pos + 1][rest]
            };
            head * tail
        };
        let first = 1 + pick_weighted(rng, (1..=remaining).map(weight));
        match alt[pos] {
            Symbol::Terminal(t) => out.push(t),
            Symbol::Nonterminal(b) => sample_nt(g, counts, rng, b, first, out),
        }
        remaining -= first;
    }
}

/// Uniform draw over the distinct sentences counted in `counts`.
pub fn sample_cfg_sentence<R: Rng + ?Sized>(
    rng: &mut R,
    grammar: &Grammar,
    counts: &LanguageCounts,
) -> Vec<u32> {
    let start = grammar.start();
    let n = pick_weighted(rng, (0..counts.max_len).map(|n| counts.count_at(start, n)));
    let mut out = Vec::with_capacity(n);
    sample_nt(grammar, counts, rng, start, n, &mut out);
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct Item {
    nt: usize,
    alt: usize,
    dot: usize,
    origin: usize,
}

/// Earley recognition of `tokens` as a sentence of the start symbol.
pub fn cfg_accepts(tokens: &[u32], grammar: &Grammar) -> bool {
    if tokens.is_empty() {
        return false;
    }
    let n = tokens.len();
    let mut chart: Vec<Vec<Item>> = vec![Vec::new(); n + 1];
    let add = |set: &mut Vec<Item>, it: Item| {
        if !set.contains(&it) {
            set.push(it);
        }
    };
    for alt in 0..grammar.rules[grammar.start].len() {
        add(
            &mut chart[0],
            Item {
                nt: grammar.start,
                alt,
                dot: 0,
                origin: 0,
            },
        );
    }
    for i in 0..=n {
        let mut k = 0;
        while k < chart[i].len() {
            let it = chart[i][k];
            k += 1;
            let body = &grammar.rules[it.nt][it.alt];
            match body.get(it.dot) {
                None => {
                    // complete
                    let parents: Vec<Item> = chart[it.origin]
                        .iter()
                        .filter(|p| {
                            grammar.rules[p.nt][p.alt].get(p.dot) == Some(&Symbol::Nonterminal(it.nt))
                        })
                        .copied()
                        .collect();
                    for p in parents {
                        add(&mut chart[i], Item { dot: p.dot + 1, ..p });
                    }
                }
                Some(Symbol::Nonterminal(b)) => {
                    for alt in 0..grammar.rules[*b].len() {
                        add(
                            &mut chart[i],
                            Item {
                                nt: *b,
                                alt,
                                dot: 0,
                                origin: i,
                            },
                        );
                    }
                }
                Some(Symbol::Terminal(t)) => {
                    if i < n && tokens[i] == *t {
                        let next = Item { dot: it.dot + 1, ..it };
                        add(&mut chart[i + 1], next);
                    }
                }
            }
        }
    }
    chart[n].iter().any(|it| {
        it.nt == grammar.start && it.origin == 0 && it.dot == grammar.rules[it.nt][it.alt].len()
    })
}
