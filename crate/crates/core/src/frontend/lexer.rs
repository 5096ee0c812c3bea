use super::ast::Span;
use super::error::FrontendError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Float(f32),
    Punct(&'static str),
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Float(v) => format!("`{v:?}`"),
            Tok::Punct(p) => format!("`{p}`"),
            Tok::Eof => "end of input".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
}

// Longest first so that `<<` wins over `<`.
const PUNCTS: &[&str] = &[
    "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "(", ")", "{", "}", "[", "]", ";", ",", ":",
    ".", "=", "+", "-", "*", "/", "%", "<", ">", "!", "~", "&", "|", "^",
];

pub fn tokenize(src: &str) -> Result<Vec<Token>, FrontendError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);

    macro_rules! bump {
        () => {{
            if bytes[i] == b'\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }

    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            bump!();
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                bump!();
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            let start = Span::new(line, col);
            bump!();
            bump!();
            loop {
                if i >= bytes.len() {
                    return Err(FrontendError::Syntax {
                        span: start,
                        expected: vec!["`*/`".into()],
                        found: "end of input".into(),
                    });
                }
                if bytes[i] == b'*' && bytes.get(i + 1) == Some(&b'/') {
                    bump!();
                    bump!();
                    break;
                }
                bump!();
            }
            continue;
        }

        let span = Span::new(line, col);
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                bump!();
            }
            out.push(Token {
                tok: Tok::Ident(src[start..i].to_string()),
                span,
            });
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            let mut is_float = false;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                bump!();
            }
            if i < bytes.len() && bytes[i] == b'.' {
                is_float = true;
                bump!();
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    bump!();
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let save = (i, line, col);
                bump!();
                if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
                    bump!();
                }
                if i < bytes.len() && bytes[i].is_ascii_digit() {
                    is_float = true;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        bump!();
                    }
                } else {
                    (i, line, col) = save;
                }
            }
            let text = &src[start..i];
            if i < bytes.len() && (bytes[i] == b'f' || bytes[i] == b'F') {
                is_float = true;
                bump!();
            }
            let tok = if is_float {
                Tok::Float(text.parse::<f32>().map_err(|_| FrontendError::Syntax {
                    span,
                    expected: vec!["a float literal".into()],
                    found: format!("`{text}`"),
                })?)
            } else {
                Tok::Int(text.parse::<i64>().ok().filter(|v| *v <= 1 << 31).ok_or_else(|| {
                    FrontendError::Syntax {
                        span,
                        expected: vec!["an integer literal within 32 bits".into()],
                        found: format!("`{text}`"),
                    }
                })?)
            };
            out.push(Token { tok, span });
            continue;
        }
        let rest = &src[i..];
        match PUNCTS.iter().find(|p| rest.starts_with(**p)) {
            Some(p) => {
                for _ in 0..p.len() {
                    bump!();
                }
                out.push(Token {
                    tok: Tok::Punct(p),
                    span,
                });
            }
            None => {
                let ch = rest.chars().next().unwrap_or('?');
                return Err(FrontendError::Syntax {
                    span,
                    expected: vec!["a token".into()],
                    found: format!("`{ch}`"),
                });
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        span: Span::new(line, col),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(src: &str) -> Vec<Tok> {
        tokenize(src).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn numbers_and_operators() {
        assert_eq!(
            toks("a<<=1.5e2f"),
            vec![
                Tok::Ident("a".into()),
                Tok::Punct("<<"),
                Tok::Punct("="),
                Tok::Float(150.0),
                Tok::Eof
            ]
        );
        assert_eq!(toks("1e3"), vec![Tok::Float(1000.0), Tok::Eof]);
        assert_eq!(toks(".5"), vec![Tok::Float(0.5), Tok::Eof]);
    }

    #[test]
    fn comments_and_positions() {
        let t = tokenize("// x\n  /* y\n */ foo").unwrap();
        assert_eq!(t[0].tok, Tok::Ident("foo".into()));
        assert_eq!((t[0].span.line, t[0].span.col), (3, 5));
    }

    #[test]
    fn rejects_stray_characters() {
        assert!(matches!(tokenize("a @ b"), Err(FrontendError::Syntax { .. })));
        assert!(tokenize("/* open").is_err());
        assert!(tokenize("99999999999").is_err());
    }
}
