use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::exprcore::{is_num_token, num_token, parse_decimal, ExprTree, MappedProblem, Op};

use super::ModelError;

pub const PAD: &str = "[pad]";
pub const BOS: &str = "[bos]";
pub const EOS: &str = "[eos]";
pub const UNK: &str = "[unk]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    /// Operators, parentheses, number placeholders and constants.
    Expr,
    Word,
}

fn classify(token: &str) -> TokenKind {
    match token {
        PAD | BOS | EOS | UNK => TokenKind::Special,
        "(" | ")" => TokenKind::Expr,
        t if Op::from_symbol(t).is_some() || is_num_token(t) || parse_decimal(t).is_some() => TokenKind::Expr,
        _ => TokenKind::Word,
    }
}

/// Dense token index shared by the encoder input and the decoder output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    kinds: Vec<TokenKind>,
    pad: usize,
    bos: usize,
    eos: usize,
    unk: Option<usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab, ModelError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), i).is_some() {
                return Err(ModelError::Vocab(format!("duplicate token '{token}'")));
            }
        }
        let require = |t: &str| index.get(t).copied().ok_or_else(|| ModelError::Vocab(format!("missing {t}")));
        let (pad, bos, eos) = (require(PAD)?, require(BOS)?, require(EOS)?);
        let unk = index.get(UNK).copied();
        let kinds = tokens.iter().map(|t| classify(t)).collect();
        Ok(Vocab { tokens, index, kinds, pad, bos, eos, unk })
    }

    /// Specials, operators, parentheses, `NUM0..` up to the widest number table,
    /// constants seen in ground truths, then problem words, each group sorted.
    pub fn build(problems: &[MappedProblem]) -> Vocab {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(Op::ALL.iter().map(|op| op.symbol().to_string()));
        tokens.extend(["(", ")"].iter().map(|s| s.to_string()));
        let nums = problems.iter().map(|p| p.numbers.len()).max().unwrap_or(0);
        tokens.extend((0..nums).map(num_token));
        let mut constants = BTreeSet::new();
        let mut words = BTreeSet::new();
        for problem in problems {
            for token in problem.ground_truth.to_tokens() {
                if classify(&token) == TokenKind::Expr && !is_num_token(&token) && parse_decimal(&token).is_some() {
                    constants.insert(token);
                }
            }
            for token in &problem.tokens {
                if classify(token) == TokenKind::Word {
                    words.insert(token.clone());
                }
            }
        }
        tokens.extend(constants);
        tokens.extend(words);
        Vocab::from_tokens(tokens).expect("specials are present and groups are disjoint")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn kind(&self, id: usize) -> TokenKind {
        self.kinds[id]
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    /// Tokens the decoder may emit: expression tokens and `[eos]`.
    pub fn generable(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.kinds[i] == TokenKind::Expr || i == self.eos).collect()
    }

    /// Map tokens to ids; unknown tokens go to `[unk]`, or fail when the vocab has none.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, ModelError> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.id(t).or(self.unk).ok_or_else(|| ModelError::Vocab(format!("unknown token '{t}'")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// `[bos] tokens [eos]`.
    pub fn wrap(&self, ids: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(ids.len() + 2);
        out.push(self.bos);
        out.extend_from_slice(ids);
        out.push(self.eos);
        out
    }

    /// Wrapped ids of an expression; fails when it uses tokens outside the vocab.
    pub fn encode_expression(&self, tree: &ExprTree) -> Result<Vec<usize>, ModelError> {
        let ids = tree
            .to_tokens()
            .iter()
            .map(|t| self.id(t).ok_or_else(|| ModelError::Vocab(format!("expression token '{t}' not in vocabulary"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.wrap(&ids))
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = ModelError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(vocab: Vocab) -> Self {
        vocab.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprcore::{map_numbers, parse_expression};

    fn problem() -> MappedProblem {
        let (tokens, numbers) = map_numbers("A project is completed in 25 days by 12 workers .");
        MappedProblem { id: "p".into(), tokens, numbers, ground_truth: parse_expression("NUM0 * 3.5").unwrap() }
    }

    #[test]
    fn build_orders_groups() {
        let vocab = Vocab::build(&[problem()]);
        assert_eq!(&vocab.tokens()[..4], &[PAD, BOS, EOS, UNK]);
        assert_eq!(vocab.id("NUM1"), Some(11));
        assert_eq!(vocab.id("3.5"), Some(12));
        assert_eq!(vocab.kind(vocab.id("days").unwrap()), TokenKind::Word);
        let generable = vocab.generable();
        assert!(generable.contains(&vocab.eos()));
        assert!(!generable.contains(&vocab.bos()));
        assert!(!generable.contains(&vocab.id("days").unwrap()));
        assert_eq!(generable.len(), 4 + 2 + 2 + 1 + 1);
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let vocab = Vocab::build(&[problem()]);
        let json = serde_json::to_string(&vocab).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), vocab);
        assert!(Vocab::from_tokens(vec![PAD.into(), BOS.into()]).is_err());
        assert!(Vocab::from_tokens(vec![PAD.into(), BOS.into(), EOS.into(), EOS.into()]).is_err());
    }

    #[test]
    fn encoding() {
        let vocab = Vocab::build(&[problem()]);
        let ids = vocab.encode(&["days", "zebra"]).unwrap();
        assert_eq!(ids[1], vocab.id(UNK).unwrap());
        let wrapped = vocab.encode_expression(&parse_expression("NUM0 + NUM1").unwrap()).unwrap();
        assert_eq!(vocab.decode(&wrapped), vec![BOS, "NUM0", "+", "NUM1", EOS]);
        assert!(vocab.encode_expression(&parse_expression("NUM7").unwrap()).is_err());
    }
}
