//! Ground normal logic programs: atom table, rules, text format.
//!
//! The text format is line oriented and mirrors the usual ASP listing style:
//!
//! ```text
//! % comment
//! a :- not b.
//! b :- not a.
//! p.
//! ```
//!
//! Atoms are indexed in order of first appearance. A program whose atom table
//! cannot be recovered from its rules alone (isolated atoms, or an order that
//! differs from first appearance) is serialized with a leading
//! `#atoms a0, a1, ... .` declaration so that parsing inverts serialization.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

pub const MAX_ATOM_NAME: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub index: usize,
    pub name: String,
}

/// A normal rule `head :- pos..., not neg...`. Both bodies are kept sorted
/// and duplicate free.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rule {
    pub head: usize,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

impl Rule {
    pub fn new(
        head: usize,
        pos: impl IntoIterator<Item = usize>,
        neg: impl IntoIterator<Item = usize>,
    ) -> Self {
        let mut pos: Vec<usize> = pos.into_iter().collect();
        let mut neg: Vec<usize> = neg.into_iter().collect();
        pos.sort_unstable();
        pos.dedup();
        neg.sort_unstable();
        neg.dedup();
        Rule { head, pos, neg }
    }

    pub fn fact(head: usize) -> Self {
        Rule {
            head,
            pos: Vec::new(),
            neg: Vec::new(),
        }
    }

    pub fn is_fact(&self) -> bool {
        self.pos.is_empty() && self.neg.is_empty()
    }

    pub fn body_len(&self) -> usize {
        self.pos.len() + self.neg.len()
    }

    /// True when some atom occurs both positively and negatively in the body.
    pub fn is_self_inconsistent(&self) -> bool {
        // both lists are sorted
        let (mut i, mut j) = (0, 0);
        while i < self.pos.len() && j < self.neg.len() {
            match self.pos[i].cmp(&self.neg[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

/// An immutable ground program over the atom universe `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundProgram {
    atoms: Vec<Atom>,
    rules: Vec<Rule>,
    heads_index: Vec<Vec<usize>>,
}

impl GroundProgram {
    pub fn empty() -> Self {
        GroundProgram {
            atoms: Vec::new(),
            rules: Vec::new(),
            heads_index: Vec::new(),
        }
    }

    /// Assembles a program without any checking. `heads_index` is taken as
    /// given; use [`validate`] to inspect the result.
    pub fn from_raw_parts(
        atoms: Vec<Atom>,
        rules: Vec<Rule>,
        heads_index: Vec<Vec<usize>>,
    ) -> Self {
        GroundProgram {
            atoms,
            rules,
            heads_index,
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn atom_name(&self, i: usize) -> &str {
        &self.atoms[i].name
    }

    pub fn atom_index(&self, name: &str) -> Option<usize> {
        self.atoms.iter().position(|a| a.name == name)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Rule ids whose head is `atom`.
    pub fn rules_with_head(&self, atom: usize) -> &[usize] {
        &self.heads_index[atom]
    }

    pub fn heads_index(&self) -> &[Vec<usize>] {
        &self.heads_index
    }

    /// Formats a set of atoms as space separated names in index order.
    pub fn format_model(&self, model: &crate::Interpretation) -> String {
        let names: Vec<&str> = model.iter().map(|i| self.atom_name(i)).collect();
        names.join(" ")
    }

    /// Parses one line of [`format_model`](Self::format_model) output.
    pub fn parse_model(&self, line: &str) -> Result<crate::Interpretation, ParseError> {
        let mut model = crate::Interpretation::empty(self.num_atoms());
        for (col, name) in line.split_whitespace().enumerate() {
            let i = self.atom_index(name).ok_or_else(|| ParseError {
                line: 1,
                column: col + 1,
                message: format!("unknown atom `{name}`"),
            })?;
            model.insert(i);
        }
        Ok(model)
    }
}

/// Outcome counters of program construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub dropped_inconsistent: usize,
    pub duplicates_removed: usize,
}

/// Incremental program construction; interns atom names and filters rules.
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    atoms: Vec<Atom>,
    by_name: HashMap<String, usize>,
    rules: Vec<Rule>,
    seen: HashSet<Rule>,
    report: BuildReport,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Interns `name`, returning its index.
    pub fn atom(&mut self, name: &str) -> usize {
        if let Some(&i) = self.by_name.get(name) {
            return i;
        }
        let i = self.atoms.len();
        self.atoms.push(Atom {
            index: i,
            name: name.to_string(),
        });
        self.by_name.insert(name.to_string(), i);
        i
    }

    /// Adds a rule over already interned atoms. Self-inconsistent bodies are
    /// dropped and exact duplicates are skipped. Returns whether it was kept.
    pub fn rule(&mut self, rule: Rule) -> bool {
        let n = self.atoms.len();
        assert!(
            rule.head < n && rule.pos.iter().chain(&rule.neg).all(|&a| a < n),
            "rule references an atom that was not interned"
        );
        if rule.is_self_inconsistent() {
            log::warn!(
                "dropping rule with head {} whose body is self-inconsistent",
                self.atoms[rule.head].name
            );
            self.report.dropped_inconsistent += 1;
            return false;
        }
        if !self.seen.insert(rule.clone()) {
            self.report.duplicates_removed += 1;
            return false;
        }
        self.rules.push(rule);
        true
    }

    pub fn build(self) -> (GroundProgram, BuildReport) {
        let mut heads_index = vec![Vec::new(); self.atoms.len()];
        for (id, r) in self.rules.iter().enumerate() {
            heads_index[r.head].push(id);
        }
        (
            GroundProgram {
                atoms: self.atoms,
                rules: self.rules,
                heads_index,
            },
            self.report,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// Parses program text. See the module docs for the grammar.
pub fn parse_program(text: &str) -> Result<(GroundProgram, BuildReport), ParseError> {
    let mut parser = Parser {
        chars: text.chars().collect(),
        pos: 0,
        line: 1,
        col: 1,
    };
    let mut builder = ProgramBuilder::new();
    loop {
        parser.skip_trivia();
        if parser.at_end() {
            break;
        }
        if parser.peek() == Some('#') {
            parser.directive(&mut builder)?;
            continue;
        }
        let head = parser.name()?;
        let head = builder.atom(&head);
        parser.skip_trivia();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        if parser.eat_str(":-") {
            loop {
                parser.skip_trivia();
                let (negated, name) = parser.literal()?;
                let a = builder.atom(&name);
                if negated {
                    neg.push(a)
                } else {
                    pos.push(a)
                }
                parser.skip_trivia();
                if !parser.eat(',') {
                    break;
                }
            }
        }
        parser.skip_trivia();
        parser.expect('.')?;
        builder.rule(Rule::new(head, pos, neg));
    }
    let (program, report) = builder.build();
    if report.dropped_inconsistent > 0 {
        log::warn!(
            "{} self-inconsistent rule(s) dropped",
            report.dropped_inconsistent
        );
    }
    Ok((program, report))
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
}

impl Parser {
    fn at_end(&self) -> bool {
        self.pos >= self.chars.len()
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            line: self.line,
            column: self.col,
            message: message.into(),
        })
    }

    fn skip_trivia(&mut self) {
        while let Some(c) = self.peek() {
            if c == '%' {
                while let Some(c) = self.peek() {
                    if c == '\n' {
                        break;
                    }
                    self.bump();
                }
            } else if c.is_whitespace() {
                self.bump();
            } else {
                break;
            }
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn eat_str(&mut self, s: &str) -> bool {
        let n = s.chars().count();
        if self.chars.len() >= self.pos + n
            && self.chars[self.pos..self.pos + n]
                .iter()
                .copied()
                .eq(s.chars())
        {
            for _ in 0..n {
                self.bump();
            }
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            match self.peek() {
                Some(found) => self.error(format!("expected `{c}`, found `{found}`")),
                None => self.error(format!("expected `{c}`, found end of input")),
            }
        }
    }

    /// An atom name; commas are part of the name only inside parentheses.
    fn name(&mut self) -> Result<String, ParseError> {
        let (line, col) = (self.line, self.col);
        let mut depth = 0usize;
        let mut out = String::new();
        while let Some(c) = self.peek() {
            let take = match c {
                '(' => {
                    depth += 1;
                    true
                }
                ')' if depth > 0 => {
                    depth -= 1;
                    true
                }
                ')' => return self.error("unbalanced `)`"),
                ',' => depth > 0,
                c => c.is_alphanumeric() || c == '_',
            };
            if !take {
                break;
            }
            out.push(c);
            self.bump();
        }
        if depth > 0 {
            return self.error("unclosed `(` in atom name");
        }
        if out.is_empty() {
            return match self.peek() {
                Some(c) => Err(ParseError {
                    line,
                    column: col,
                    message: format!("expected atom name, found `{c}`"),
                }),
                None => Err(ParseError {
                    line,
                    column: col,
                    message: "expected atom name, found end of input".into(),
                }),
            };
        }
        if out.chars().count() > MAX_ATOM_NAME {
            return Err(ParseError {
                line,
                column: col,
                message: format!("atom name longer than {MAX_ATOM_NAME} characters"),
            });
        }
        Ok(out)
    }

    fn literal(&mut self) -> Result<(bool, String), ParseError> {
        let first = self.name()?;
        if first == "not" && self.peek().is_some_and(char::is_whitespace) {
            self.skip_trivia();
            return Ok((true, self.name()?));
        }
        Ok((false, first))
    }

    fn directive(&mut self, builder: &mut ProgramBuilder) -> Result<(), ParseError> {
        if !self.eat_str("#atoms") {
            return self.error("unknown directive");
        }
        loop {
            self.skip_trivia();
            if self.peek() == Some('.') {
                break;
            }
            let name = self.name()?;
            builder.atom(&name);
            self.skip_trivia();
            if !self.eat(',') {
                break;
            }
        }
        self.skip_trivia();
        self.expect('.')
    }
}

/// Renders a program in the text format accepted by [`parse_program`].
pub fn serialize_program(p: &GroundProgram) -> String {
    let mut out = String::new();
    if !rules_reproduce_atom_table(p) {
        out.push_str("#atoms ");
        let names: Vec<&str> = p.atoms.iter().map(|a| a.name.as_str()).collect();
        out.push_str(&names.join(", "));
        out.push_str(".\n");
    }
    for r in &p.rules {
        out.push_str(&p.atoms[r.head].name);
        if !r.is_fact() {
            out.push_str(" :- ");
            let lits = r
                .pos
                .iter()
                .map(|&a| p.atoms[a].name.clone())
                .chain(r.neg.iter().map(|&a| format!("not {}", p.atoms[a].name)));
            out.push_str(&lits.collect::<Vec<_>>().join(", "));
        }
        out.push_str(".\n");
    }
    out
}

fn rules_reproduce_atom_table(p: &GroundProgram) -> bool {
    let mut next = 0;
    let mut seen = vec![false; p.num_atoms()];
    for r in &p.rules {
        for &a in std::iter::once(&r.head).chain(&r.pos).chain(&r.neg) {
            if !seen[a] {
                if a != next {
                    return false;
                }
                seen[a] = true;
                next += 1;
            }
        }
    }
    next == p.num_atoms()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Issue {
    AtomIndexMismatch { position: usize, index: usize },
    DuplicateAtomName { name: String },
    EmptyAtomName { index: usize },
    OutOfRangeHead { rule: usize, head: usize },
    OutOfRangeBody { rule: usize, atom: usize },
    UnsortedBody { rule: usize },
    SelfInconsistentBody { rule: usize },
    DuplicateRule { rule: usize, first: usize },
    HeadsIndexLength { expected: usize, found: usize },
    HeadsIndexMissing { rule: usize },
    HeadsIndexStray { atom: usize, rule: usize },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::AtomIndexMismatch { position, index } => {
                write!(f, "atom at position {position} carries index {index}")
            }
            Issue::DuplicateAtomName { name } => write!(f, "duplicate atom name `{name}`"),
            Issue::EmptyAtomName { index } => write!(f, "atom {index} has an empty name"),
            Issue::OutOfRangeHead { rule, head } => {
                write!(f, "out-of-range head {head} in rule {rule}")
            }
            Issue::OutOfRangeBody { rule, atom } => {
                write!(f, "out-of-range body atom {atom} in rule {rule}")
            }
            Issue::UnsortedBody { rule } => {
                write!(f, "rule {rule} has an unsorted or repeated body")
            }
            Issue::SelfInconsistentBody { rule } => {
                write!(
                    f,
                    "rule {rule} has an atom in both positive and negative body"
                )
            }
            Issue::DuplicateRule { rule, first } => {
                write!(f, "duplicate rule {rule} (same as rule {first})")
            }
            Issue::HeadsIndexLength { expected, found } => {
                write!(f, "heads index has {found} entries, expected {expected}")
            }
            Issue::HeadsIndexMissing { rule } => {
                write!(f, "rule {rule} is missing from the heads index")
            }
            Issue::HeadsIndexStray { atom, rule } => {
                write!(
                    f,
                    "heads index of atom {atom} lists rule {rule} with a different head"
                )
            }
        }
    }
}

/// Checks every structural invariant; an empty report means all hold.
pub fn validate(p: &GroundProgram) -> Vec<Issue> {
    let n = p.num_atoms();
    let mut issues = Vec::new();
    let mut names = HashSet::new();
    for (pos, a) in p.atoms.iter().enumerate() {
        if a.index != pos {
            issues.push(Issue::AtomIndexMismatch {
                position: pos,
                index: a.index,
            });
        }
        if a.name.is_empty() {
            issues.push(Issue::EmptyAtomName { index: pos });
        }
        if !names.insert(a.name.as_str()) {
            issues.push(Issue::DuplicateAtomName {
                name: a.name.clone(),
            });
        }
    }
    let mut first_seen: HashMap<&Rule, usize> = HashMap::new();
    for (id, r) in p.rules.iter().enumerate() {
        if r.head >= n {
            issues.push(Issue::OutOfRangeHead {
                rule: id,
                head: r.head,
            });
        }
        for &a in r.pos.iter().chain(&r.neg) {
            if a >= n {
                issues.push(Issue::OutOfRangeBody { rule: id, atom: a });
            }
        }
        if r.pos.windows(2).any(|w| w[0] >= w[1]) || r.neg.windows(2).any(|w| w[0] >= w[1]) {
            issues.push(Issue::UnsortedBody { rule: id });
        }
        if r.is_self_inconsistent() {
            issues.push(Issue::SelfInconsistentBody { rule: id });
        }
        match first_seen.get(r) {
            Some(&first) => issues.push(Issue::DuplicateRule { rule: id, first }),
            None => {
                first_seen.insert(r, id);
            }
        }
    }
    if p.heads_index.len() != n {
        issues.push(Issue::HeadsIndexLength {
            expected: n,
            found: p.heads_index.len(),
        });
    }
    let mut listed = vec![0usize; p.rules.len()];
    for (atom, ids) in p.heads_index.iter().enumerate() {
        for &id in ids {
            match p.rules.get(id) {
                Some(r) if r.head == atom => listed[id] += 1,
                _ => issues.push(Issue::HeadsIndexStray { atom, rule: id }),
            }
        }
    }
    for (id, &count) in listed.iter().enumerate() {
        if count != 1 && p.rules[id].head < n {
            issues.push(Issue::HeadsIndexMissing { rule: id });
        }
    }
    issues
}

/// Human-readable rendering of a validation report, one issue per line.
pub fn format_report(issues: &[Issue]) -> String {
    let mut s = String::new();
    for i in issues {
        let _ = writeln!(s, "{i}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> GroundProgram {
        parse_program(text).unwrap().0
    }

    #[test]
    fn two_cycle() {
        let p = parse("a :- not b.\nb :- not a.");
        assert_eq!(p.num_atoms(), 2);
        assert_eq!(p.atom_name(0), "a");
        assert_eq!(p.atom_name(1), "b");
        assert_eq!(p.rules(), &[Rule::new(0, [], [1]), Rule::new(1, [], [0])]);
        assert_eq!(p.rules_with_head(0), &[0]);
    }

    #[test]
    fn empty_input() {
        let (p, report) = parse_program("").unwrap();
        assert_eq!(p.num_atoms(), 0);
        assert!(p.rules().is_empty());
        assert_eq!(report, BuildReport::default());
        assert_eq!(serialize_program(&p), "");
    }

    #[test]
    fn self_inconsistent_rule_dropped() {
        let (p, report) = parse_program("p :- q, not q.\np.").unwrap();
        assert_eq!(p.num_atoms(), 2);
        assert_eq!(p.rules(), &[Rule::fact(0)]);
        assert_eq!(report.dropped_inconsistent, 1);
    }

    #[test]
    fn duplicates_removed() {
        let (p, report) = parse_program("a :- b, not c.\na :- not c, b, b.\n").unwrap();
        assert_eq!(p.rules().len(), 1);
        assert_eq!(report.duplicates_removed, 1);
    }

    #[test]
    fn comments_whitespace_and_terms() {
        let p = parse("% header\n  digit(1,2) :-\n   x_1 ,  not  y . % trailing\nnot_a :- nota.\n");
        assert_eq!(p.atom_name(0), "digit(1,2)");
        assert_eq!(p.rules()[0], Rule::new(0, [1], [2]));
        assert_eq!(p.atom_name(3), "not_a");
        assert_eq!(p.atom_name(4), "nota");
    }

    #[test]
    fn syntax_errors_carry_position() {
        let e = parse_program("a :- b\nc.").unwrap_err();
        assert_eq!((e.line, e.column), (2, 1));
        let e = parse_program("a :- .").unwrap_err();
        assert_eq!((e.line, e.column), (1, 6));
        assert!(parse_program("a(b.").is_err());
        assert!(parse_program("a").is_err());
        let long = "x".repeat(256);
        assert!(parse_program(&format!("{long}.")).is_err());
        assert!(parse_program(&format!("{}.", "x".repeat(255))).is_ok());
    }

    #[test]
    fn serialize_examples() {
        let p = parse("a :- not b.\nb :- not a.");
        assert_eq!(serialize_program(&p), "a :- not b.\nb :- not a.\n");
        assert_eq!(serialize_program(&parse("p.")), "p.\n");
    }

    #[test]
    fn serialize_declares_atoms_when_needed() {
        let mut b = ProgramBuilder::new();
        for name in ["a0", "a1", "a2"] {
            b.atom(name);
        }
        b.rule(Rule::new(0, [], [2]));
        let (p, _) = b.build();
        let text = serialize_program(&p);
        assert_eq!(text, "#atoms a0, a1, a2.\na0 :- not a2.\n");
        assert_eq!(parse(&text), p);
    }

    #[test]
    fn validate_clean_program() {
        assert!(validate(&parse("a :- not b.\nb :- not a.")).is_empty());
    }

    #[test]
    fn validate_out_of_range_head() {
        let p = GroundProgram::from_raw_parts(
            vec![Atom {
                index: 0,
                name: "a".into(),
            }],
            vec![Rule::fact(1)],
            vec![vec![]],
        );
        let issues = validate(&p);
        assert_eq!(issues, vec![Issue::OutOfRangeHead { rule: 0, head: 1 }]);
        assert!(issues[0].to_string().contains("out-of-range head"));
    }

    #[test]
    fn validate_duplicate_rule() {
        let p = GroundProgram::from_raw_parts(
            vec![Atom {
                index: 0,
                name: "a".into(),
            }],
            vec![Rule::fact(0), Rule::fact(0)],
            vec![vec![0, 1]],
        );
        assert_eq!(
            validate(&p),
            vec![Issue::DuplicateRule { rule: 1, first: 0 }]
        );
    }

    #[test]
    fn validate_heads_index() {
        let p = GroundProgram::from_raw_parts(
            vec![
                Atom {
                    index: 0,
                    name: "a".into(),
                },
                Atom {
                    index: 1,
                    name: "b".into(),
                },
            ],
            vec![Rule::fact(0), Rule::fact(1)],
            vec![vec![0, 1], vec![]],
        );
        assert_eq!(
            validate(&p),
            vec![
                Issue::HeadsIndexStray { atom: 0, rule: 1 },
                Issue::HeadsIndexMissing { rule: 1 }
            ]
        );
    }

    #[test]
    fn model_lines() {
        let p = parse("a :- not b.\nb :- not a.");
        let m = p.parse_model("b").unwrap();
        assert_eq!(p.format_model(&m), "b");
        assert!(p.parse_model("zz").is_err());
        assert!(p.parse_model("").unwrap().is_empty());
    }
}
