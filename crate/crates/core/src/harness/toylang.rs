//! A tiny string-transformation language used to grade generated programs
//! without leaving the process.
//!
//! A program is read one character at a time and rewrites a working string
//! that starts as the input:
//!
//! | op  | effect                     |
//! |-----|----------------------------|
//! | `d` | double (`s + s`)           |
//! | `r` | reverse                    |
//! | `u` | uppercase                  |
//! | `l` | lowercase                  |
//! | `h` | drop the first character   |
//! | `t` | drop the last character    |
//! | `s` | sort characters            |
//! | `x` | clear                      |
//!
//! Any other character is appended literally. Every string is a valid
//! program, so grading never fails for syntactic reasons.

use super::corpus::EntryCheck;

/// Upper bound on the working string, so `dddd...` cannot exhaust memory.
pub const MAX_OUTPUT: usize = 1 << 16;

pub fn run(program: &str, input: &str) -> String {
    let mut s: Vec<char> = input.chars().collect();
    for op in program.chars() {
        match op {
            'd' => {
                if s.len() * 2 <= MAX_OUTPUT {
                    s.extend_from_within(..);
                }
            }
            'r' => s.reverse(),
            'u' => s = s.into_iter().flat_map(char::to_uppercase).collect(),
            'l' => s = s.into_iter().flat_map(char::to_lowercase).collect(),
            'h' => {
                if !s.is_empty() {
                    s.remove(0);
                }
            }
            't' => {
                s.pop();
            }
            's' => s.sort_unstable(),
            'x' => s.clear(),
            c => {
                if s.len() < MAX_OUTPUT {
                    s.push(c)
                }
            }
        }
    }
    s.into_iter().collect()
}

/// Per-check pass flags and actual outputs.
pub fn check(program: &str, checks: &[EntryCheck]) -> Vec<(bool, String)> {
    checks
        .iter()
        .map(|c| {
            let got = run(program, &c.input);
            (got == c.out, got)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_and_identity() {
        assert_eq!(run("d", "ab"), "abab");
        assert_eq!(run("", "ab"), "ab");
    }

    #[test]
    fn ops() {
        assert_eq!(run("r", "abc"), "cba");
        assert_eq!(run("u", "ab"), "AB");
        assert_eq!(run("ul", "aB"), "ab");
        assert_eq!(run("h", "abc"), "bc");
        assert_eq!(run("t", "abc"), "ab");
        assert_eq!(run("s", "cab"), "abc");
        assert_eq!(run("x9", "abc"), "9");
        assert_eq!(run("hhh", "a"), "");
    }

    #[test]
    fn bounded_growth() {
        let out = run(&"d".repeat(40), "ab");
        assert!(out.chars().count() <= MAX_OUTPUT);
    }
}
