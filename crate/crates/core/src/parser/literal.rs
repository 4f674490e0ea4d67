//! Recursive-descent reader for the Python-literal subset models emit:
//! dicts, lists, strings in either quote style, integers, and bare words.
//!
//! The reader never panics. It records every tolerance it had to apply in
//! [`Repairs`] so callers can report whether the input was strictly valid.

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Dict(Vec<(Value, Value)>),
    List(Vec<Value>),
    Str(String),
    Int(i64),
    /// Unquoted token such as `situation`, `None`, `...` or `1.5`.
    Bare(String),
}

impl Value {
    /// Text of a scalar value; containers yield `None`.
    pub fn as_text(&self) -> Option<String> {
        match self {
            Value::Str(s) | Value::Bare(s) => Some(s.clone()),
            Value::Int(i) => Some(i.to_string()),
            _ => None,
        }
    }

    pub fn is_scalar(&self) -> bool {
        !matches!(self, Value::Dict(_) | Value::List(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Repairs {
    /// Single or typographic quotes, unescaped interior quotes, or bare words.
    pub quote_style: bool,
    pub trailing_comma: bool,
    pub missing_comma: bool,
    pub truncated: bool,
}

impl Repairs {
    pub fn any(&self) -> bool {
        self.quote_style || self.trailing_comma || self.missing_comma || self.truncated
    }

    pub fn merge(&mut self, other: Repairs) {
        self.quote_style |= other.quote_style;
        self.trailing_comma |= other.trailing_comma;
        self.missing_comma |= other.missing_comma;
        self.truncated |= other.truncated;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LitError {
    /// Input ended inside a structure.
    Eof,
    Syntax {
        pos: usize,
        message: String,
    },
}

pub type LitResult<T> = Result<T, LitError>;

pub struct Reader<'a> {
    chars: Vec<char>,
    pos: usize,
    pub repairs: Repairs,
    _src: std::marker::PhantomData<&'a str>,
}

fn is_structural(c: char) -> bool {
    matches!(c, ',' | ':' | '}' | ']' | '{' | '[')
}

fn closing_quotes(open: char) -> &'static [char] {
    match open {
        '"' => &['"', '\u{201D}'],
        '\'' => &['\'', '\u{2019}'],
        '\u{201C}' | '\u{201D}' => &['\u{201D}', '"'],
        '\u{2018}' | '\u{2019}' => &['\u{2019}', '\''],
        _ => &['"'],
    }
}

pub fn is_open_quote(c: char) -> bool {
    matches!(
        c,
        '"' | '\'' | '\u{201C}' | '\u{201D}' | '\u{2018}' | '\u{2019}'
    )
}

impl<'a> Reader<'a> {
    pub fn new(src: &'a str) -> Self {
        Self {
            chars: src.chars().collect(),
            pos: 0,
            repairs: Repairs::default(),
            _src: std::marker::PhantomData,
        }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn set_pos(&mut self, pos: usize) {
        self.pos = pos.min(self.chars.len());
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    pub fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        Some(c)
    }

    pub fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    /// Next non-whitespace character at or after `from`.
    fn next_significant(&self, from: usize) -> Option<char> {
        self.chars[from.min(self.chars.len())..]
            .iter()
            .copied()
            .find(|c| !c.is_whitespace())
    }

    pub fn find_from(&self, from: usize, target: char) -> Option<usize> {
        (from..self.chars.len()).find(|&i| self.chars[i] == target)
    }

    pub fn slice(&self, from: usize, to: usize) -> String {
        self.chars[from.min(self.chars.len())..to.min(self.chars.len())]
            .iter()
            .collect()
    }

    fn syntax<T>(&self, message: impl Into<String>) -> LitResult<T> {
        Err(LitError::Syntax {
            pos: self.pos,
            message: message.into(),
        })
    }

    pub fn value(&mut self) -> LitResult<Value> {
        self.skip_ws();
        match self.peek() {
            None => Err(LitError::Eof),
            Some('{') => self.dict(),
            Some('[') => self.list(),
            Some(c) if is_open_quote(c) => self.string().map(Value::Str),
            Some(c) if c.is_ascii_digit() || c == '-' || c == '+' => Ok(self.number()),
            Some(c) if c.is_alphanumeric() || c == '_' || c == '.' => self.bare().map(Value::Bare),
            Some(c) => self.syntax(format!("unexpected character {c:?}")),
        }
    }

    pub fn dict(&mut self) -> LitResult<Value> {
        self.bump();
        let mut entries = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None => return Err(LitError::Eof),
                Some('}') => {
                    self.bump();
                    return Ok(Value::Dict(entries));
                }
                _ => {}
            }
            let key = self.value()?;
            self.skip_ws();
            match self.peek() {
                None => return Err(LitError::Eof),
                Some(':') => {
                    self.bump();
                }
                Some(c) => return self.syntax(format!("expected ':' after key, found {c:?}")),
            }
            let value = self.value()?;
            entries.push((key, value));
            if self.separator('}')? {
                return Ok(Value::Dict(entries));
            }
        }
    }

    /// Like [`Reader::dict`], but input ending right after a complete entry
    /// closes the dict instead of failing. The flag reports that case.
    pub fn dict_closing_at_eof(&mut self) -> LitResult<(Value, bool)> {
        self.bump();
        let mut entries = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None if entries.is_empty() => return Err(LitError::Eof),
                None => return Ok((Value::Dict(entries), true)),
                Some('}') => {
                    self.bump();
                    return Ok((Value::Dict(entries), false));
                }
                _ => {}
            }
            let key = self.value()?;
            self.skip_ws();
            match self.peek() {
                None => return Err(LitError::Eof),
                Some(':') => {
                    self.bump();
                }
                Some(c) => return self.syntax(format!("expected ':' after key, found {c:?}")),
            }
            let value = self.value()?;
            entries.push((key, value));
            match self.separator('}') {
                Ok(true) => return Ok((Value::Dict(entries), false)),
                Ok(false) => {}
                Err(LitError::Eof) => return Ok((Value::Dict(entries), true)),
                Err(e) => return Err(e),
            }
        }
    }

    pub fn list(&mut self) -> LitResult<Value> {
        self.bump();
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None => return Err(LitError::Eof),
                Some(']') => {
                    self.bump();
                    return Ok(Value::List(items));
                }
                _ => {}
            }
            items.push(self.value()?);
            if self.separator(']')? {
                return Ok(Value::List(items));
            }
        }
    }

    /// Consumes the separator after a container element. Returns `true` when
    /// the container was closed.
    pub fn separator(&mut self, close: char) -> LitResult<bool> {
        self.skip_ws();
        match self.peek() {
            None => Err(LitError::Eof),
            Some(c) if c == close => {
                self.bump();
                Ok(true)
            }
            Some(',') => {
                self.bump();
                self.skip_ws();
                match self.peek() {
                    Some(c) if c == close => {
                        self.repairs.trailing_comma = true;
                        self.bump();
                        Ok(true)
                    }
                    Some(',') => {
                        // doubled comma, e.g. `a, , b`
                        self.repairs.trailing_comma = true;
                        self.separator(close).map(|_| false)
                    }
                    _ => Ok(false),
                }
            }
            Some(c) if c == '{' || c == '[' || is_open_quote(c) || c.is_ascii_digit() => {
                self.repairs.missing_comma = true;
                Ok(false)
            }
            Some(c) => self.syntax(format!("expected ',' or {close:?}, found {c:?}")),
        }
    }

    pub fn string(&mut self) -> LitResult<String> {
        let open = self.bump().ok_or(LitError::Eof)?;
        if open != '"' {
            self.repairs.quote_style = true;
        }
        let closers = closing_quotes(open);
        let mut out = String::new();
        loop {
            let c = self.bump().ok_or(LitError::Eof)?;
            if c == '\\' {
                let e = self.bump().ok_or(LitError::Eof)?;
                match e {
                    'n' => out.push('\n'),
                    't' => out.push('\t'),
                    'r' => out.push('\r'),
                    'b' => out.push('\u{8}'),
                    'f' => out.push('\u{c}'),
                    'u' => out.push(self.unicode_escape()?),
                    other => out.push(other),
                }
                continue;
            }
            if closers.contains(&c) {
                match self.next_significant(self.pos) {
                    None => return Ok(out),
                    Some(n) if is_structural(n) && n != '{' && n != '[' => return Ok(out),
                    Some(_) => {
                        // interior quote left unescaped by the model
                        self.repairs.quote_style = true;
                        out.push(c);
                    }
                }
                continue;
            }
            out.push(c);
        }
    }

    fn hex4(&mut self) -> LitResult<u32> {
        let mut v = 0u32;
        for _ in 0..4 {
            let c = self.bump().ok_or(LitError::Eof)?;
            let d = match c.to_digit(16) {
                Some(d) => d,
                None => return self.syntax("bad \\u escape"),
            };
            v = v * 16 + d;
        }
        Ok(v)
    }

    fn unicode_escape(&mut self) -> LitResult<char> {
        let hi = self.hex4()?;
        if (0xD800..0xDC00).contains(&hi) {
            if self.peek() == Some('\\') && self.chars.get(self.pos + 1) == Some(&'u') {
                self.pos += 2;
                let lo = self.hex4()?;
                let code = 0x10000 + ((hi - 0xD800) << 10) + (lo.wrapping_sub(0xDC00) & 0x3FF);
                return Ok(char::from_u32(code).unwrap_or('\u{FFFD}'));
            }
            return Ok('\u{FFFD}');
        }
        Ok(char::from_u32(hi).unwrap_or('\u{FFFD}'))
    }

    fn number(&mut self) -> Value {
        let start = self.pos;
        self.bump();
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.bump();
        }
        let is_plain =
            !matches!(self.peek(), Some(c) if c.is_alphanumeric() || c == '.' || c == '_');
        if is_plain {
            let text = self.slice(start, self.pos);
            if let Ok(i) = text.parse::<i64>() {
                return Value::Int(i);
            }
        }
        self.set_pos(start);
        let word = self.bare_word();
        Value::Bare(word)
    }

    fn bare_word(&mut self) -> String {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if is_structural(c) || c == '\n' || is_open_quote(c) && c != '\'' {
                break;
            }
            self.bump();
        }
        self.slice(start, self.pos).trim().to_string()
    }

    fn bare(&mut self) -> LitResult<String> {
        let word = self.bare_word();
        if word.is_empty() {
            return self.syntax("empty token");
        }
        if !matches!(
            word.as_str(),
            "None" | "True" | "False" | "null" | "true" | "false"
        ) {
            self.repairs.quote_style = true;
        }
        Ok(word)
    }
}
