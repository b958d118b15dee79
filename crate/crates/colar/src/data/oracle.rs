//! Independent solver for `<< a op b = c >>` reasoning chains.
//!
//! Used to verify every generated sample and as the reward oracle during
//! reinforcement learning.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainStep {
    pub lhs: i64,
    pub op: char,
    pub rhs: i64,
    pub result: i64,
}

/// Parses a reasoning chain like `<< 21 / 7 = 3 >> << 5 * 3 = 15 >>`.
pub fn parse_chain(text: &str) -> Result<Vec<ChainStep>> {
    let mut steps = Vec::new();
    let mut rest = text.trim();
    while !rest.is_empty() {
        let body = rest
            .strip_prefix("<<")
            .ok_or_else(|| Error::Parse(format!("expected '<<' at {:?}", snippet(rest))))?;
        let (inner, tail) = body
            .split_once(">>")
            .ok_or_else(|| Error::Parse(format!("unterminated step at {:?}", snippet(rest))))?;
        let parts: Vec<&str> = inner.split_whitespace().collect();
        if parts.len() != 5 || parts[3] != "=" {
            return Err(Error::Parse(format!("malformed step {:?}", inner.trim())));
        }
        let lhs = parse_int(parts[0])?;
        let op = parts[1];
        let rhs = parse_int(parts[2])?;
        let result = parse_int(parts[4])?;
        let op = match op {
            "+" | "-" | "*" | "/" => op.chars().next().unwrap(),
            _ => return Err(Error::Parse(format!("unknown operator {:?}", op))),
        };
        steps.push(ChainStep { lhs, op, rhs, result });
        rest = tail.trim_start();
    }
    if steps.is_empty() {
        return Err(Error::Parse("empty chain".into()));
    }
    Ok(steps)
}

fn parse_int(s: &str) -> Result<i64> {
    s.parse::<i64>().map_err(|_| Error::Parse(format!("bad number {:?}", s)))
}

fn snippet(s: &str) -> String {
    s.chars().take(16).collect()
}

/// Evaluates each step left to right, validating the written results, and
/// returns the final step's result.
pub fn solve_chain(text: &str) -> Result<i64> {
    let steps = parse_chain(text)?;
    for s in &steps {
        let expect = match s.op {
            '+' => s.lhs.checked_add(s.rhs),
            '-' => s.lhs.checked_sub(s.rhs),
            '*' => s.lhs.checked_mul(s.rhs),
            '/' => {
                if s.rhs == 0 || s.lhs % s.rhs != 0 {
                    return Err(Error::Validation(format!(
                        "inexact or zero division: {} / {}",
                        s.lhs, s.rhs
                    )));
                }
                Some(s.lhs / s.rhs)
            }
            _ => unreachable!(),
        };
        match expect {
            Some(v) if v == s.result => {}
            _ => {
                return Err(Error::Validation(format!(
                    "step {} {} {} = {} is arithmetically wrong",
                    s.lhs, s.op, s.rhs, s.result
                )))
            }
        }
    }
    Ok(steps.last().unwrap().result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_chain_solves() {
        assert_eq!(solve_chain("<< 21 / 7 = 3 >> << 5 * 3 = 15 >>").unwrap(), 15);
    }

    #[test]
    fn one_plus_one() {
        assert_eq!(solve_chain("<< 1 + 1 = 2 >>").unwrap(), 2);
    }

    #[test]
    fn malformed_chain_is_parse_error() {
        assert!(matches!(solve_chain("<< 1 + >>"), Err(crate::Error::Parse(_))));
        assert!(matches!(solve_chain("1 + 1 = 2"), Err(crate::Error::Parse(_))));
    }

    #[test]
    fn inconsistent_step_is_validation_error() {
        assert!(matches!(solve_chain("<< 2 + 2 = 5 >>"), Err(crate::Error::Validation(_))));
    }
}
