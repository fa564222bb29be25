//! Small JSON reader with an optional lenient mode.
//!
//! Strict mode accepts RFC 8259 JSON only. Lenient mode additionally
//! accepts at most one trailing comma before a closer, closes containers
//! left open at end of input, and closes an object implicitly when a `]`
//! arrives while the object is still open (`[{"a":{}]`).
//!
//! Objects keep their pairs in source order, duplicates included.

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Value {
    Null,
    Bool(bool),
    Number(String),
    Str(String),
    Array(Vec<Value>),
    Object(Vec<(String, Value)>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct Repairs {
    pub trailing_commas: usize,
    pub closed_containers: usize,
}

const MAX_DEPTH: usize = 128;

pub(crate) struct Parsed {
    pub value: Value,
    /// Byte offset just past the value.
    pub end: usize,
    pub repairs: Repairs,
}

/// Parse one JSON value starting at byte offset `start` of `text`.
pub(crate) fn parse_value_at(text: &str, start: usize, lenient: bool) -> Result<Parsed, String> {
    let mut r = Reader {
        src: text.as_bytes(),
        text,
        pos: start,
        lenient,
        depth: 0,
        repairs: Repairs::default(),
    };
    r.skip_ws();
    let value = r.value()?;
    Ok(Parsed {
        value,
        end: r.pos,
        repairs: r.repairs,
    })
}

/// Parse the whole of `text` as exactly one strict JSON value.
pub(crate) fn parse_strict(text: &str) -> Result<Value, String> {
    let parsed = parse_value_at(text, 0, false)?;
    let mut r = Reader {
        src: text.as_bytes(),
        text,
        pos: parsed.end,
        lenient: false,
        depth: 0,
        repairs: Repairs::default(),
    };
    r.skip_ws();
    if r.pos != text.len() {
        return Err(format!("trailing characters at offset {}", r.pos));
    }
    Ok(parsed.value)
}

struct Reader<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
    lenient: bool,
    depth: usize,
    repairs: Repairs,
}

impl Reader<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn err<T>(&self, msg: &str) -> Result<T, String> {
        Err(format!("{msg} at offset {}", self.pos))
    }

    fn value(&mut self) -> Result<Value, String> {
        match self.peek() {
            None => self.err("unexpected end of input"),
            Some(b'{') => self.nested(Self::object),
            Some(b'[') => self.nested(Self::array),
            Some(b'"') => self.string().map(Value::Str),
            Some(b't') => self.literal("true", Value::Bool(true)),
            Some(b'f') => self.literal("false", Value::Bool(false)),
            Some(b'n') => self.literal("null", Value::Null),
            Some(b'-' | b'0'..=b'9') => self.number(),
            Some(_) => self.err("unexpected character"),
        }
    }

    fn nested(&mut self, f: fn(&mut Self) -> Result<Value, String>) -> Result<Value, String> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return self.err("nesting too deep");
        }
        let v = f(self);
        self.depth -= 1;
        v
    }

    fn literal(&mut self, word: &str, v: Value) -> Result<Value, String> {
        if self.src[self.pos..].starts_with(word.as_bytes()) {
            self.pos += word.len();
            Ok(v)
        } else {
            self.err("invalid literal")
        }
    }

    fn number(&mut self) -> Result<Value, String> {
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        match self.peek() {
            Some(b'0') => self.pos += 1,
            Some(b'1'..=b'9') => {
                while matches!(self.peek(), Some(b'0'..=b'9')) {
                    self.pos += 1;
                }
            }
            _ => return self.err("invalid number"),
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            if !matches!(self.peek(), Some(b'0'..=b'9')) {
                return self.err("invalid fraction");
            }
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if !matches!(self.peek(), Some(b'0'..=b'9')) {
                return self.err("invalid exponent");
            }
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
        }
        Ok(Value::Number(self.text[start..self.pos].to_string()))
    }

    fn hex4(&mut self) -> Result<u32, String> {
        let digits = self.text.get(self.pos..self.pos + 4).ok_or("truncated \\u escape")?;
        if !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
            return self.err("invalid \\u escape");
        }
        self.pos += 4;
        Ok(u32::from_str_radix(digits, 16).expect("checked hex digits"))
    }

    fn string(&mut self) -> Result<String, String> {
        debug_assert_eq!(self.peek(), Some(b'"'));
        self.pos += 1;
        let mut out = String::new();
        loop {
            let run_start = self.pos;
            while let Some(b) = self.peek() {
                if b == b'"' || b == b'\\' || b < 0x20 {
                    break;
                }
                self.pos += 1;
            }
            out.push_str(&self.text[run_start..self.pos]);
            match self.peek() {
                None => return self.err("unterminated string"),
                Some(b'"') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some(b'\\') => {
                    self.pos += 1;
                    let Some(esc) = self.peek() else {
                        return self.err("unterminated escape");
                    };
                    self.pos += 1;
                    match esc {
                        b'"' => out.push('"'),
                        b'\\' => out.push('\\'),
                        b'/' => out.push('/'),
                        b'b' => out.push('\u{8}'),
                        b'f' => out.push('\u{c}'),
                        b'n' => out.push('\n'),
                        b'r' => out.push('\r'),
                        b't' => out.push('\t'),
                        b'u' => {
                            let hi = self.hex4()?;
                            let code = if (0xD800..0xDC00).contains(&hi) {
                                if !self.src[self.pos..].starts_with(b"\\u") {
                                    return self.err("lone surrogate");
                                }
                                self.pos += 2;
                                let lo = self.hex4()?;
                                if !(0xDC00..0xE000).contains(&lo) {
                                    return self.err("invalid low surrogate");
                                }
                                0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00)
                            } else if (0xDC00..0xE000).contains(&hi) {
                                return self.err("lone surrogate");
                            } else {
                                hi
                            };
                            out.push(char::from_u32(code).expect("valid scalar"));
                        }
                        _ => return self.err("invalid escape"),
                    }
                }
                Some(_) => return self.err("control character in string"),
            }
        }
    }

    /// After a `,`: in lenient mode a closer may follow once.
    fn trailing_comma_before(&mut self, closers: &[u8]) -> Result<bool, String> {
        self.skip_ws();
        match self.peek() {
            Some(c) if closers.contains(&c) => {
                if !self.lenient || self.repairs.trailing_commas > 0 {
                    return self.err("trailing comma");
                }
                self.repairs.trailing_commas += 1;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    fn object(&mut self) -> Result<Value, String> {
        self.pos += 1;
        let mut pairs = Vec::new();
        self.skip_ws();
        if self.peek() == Some(b'}') {
            self.pos += 1;
            return Ok(Value::Object(pairs));
        }
        loop {
            if self.peek() != Some(b'"') {
                if self.lenient && self.peek().is_none() && !pairs.is_empty() {
                    self.repairs.closed_containers += 1;
                    return Ok(Value::Object(pairs));
                }
                return self.err("expected object key");
            }
            let key = self.string()?;
            self.skip_ws();
            if self.peek() != Some(b':') {
                return self.err("expected `:`");
            }
            self.pos += 1;
            self.skip_ws();
            let value = self.value()?;
            pairs.push((key, value));
            self.skip_ws();
            match self.peek() {
                Some(b',') => {
                    self.pos += 1;
                    self.trailing_comma_before(b"}]")?;
                }
                Some(b'}') => {
                    self.pos += 1;
                    return Ok(Value::Object(pairs));
                }
                Some(b']') | None if self.lenient => {
                    self.repairs.closed_containers += 1;
                    return Ok(Value::Object(pairs));
                }
                _ => return self.err("expected `,` or `}`"),
            }
            if self.peek() == Some(b'}') {
                self.pos += 1;
                return Ok(Value::Object(pairs));
            }
            if self.peek() == Some(b']') {
                // trailing comma already consumed; close implicitly
                self.repairs.closed_containers += 1;
                return Ok(Value::Object(pairs));
            }
        }
    }

    fn array(&mut self) -> Result<Value, String> {
        self.pos += 1;
        let mut items = Vec::new();
        self.skip_ws();
        if self.peek() == Some(b']') {
            self.pos += 1;
            return Ok(Value::Array(items));
        }
        loop {
            if self.lenient && self.peek().is_none() && !items.is_empty() {
                self.repairs.closed_containers += 1;
                return Ok(Value::Array(items));
            }
            items.push(self.value()?);
            self.skip_ws();
            match self.peek() {
                Some(b',') => {
                    self.pos += 1;
                    if self.trailing_comma_before(b"]")? {
                        self.pos += 1;
                        return Ok(Value::Array(items));
                    }
                }
                Some(b']') => {
                    self.pos += 1;
                    return Ok(Value::Array(items));
                }
                None if self.lenient => {
                    self.repairs.closed_containers += 1;
                    return Ok(Value::Array(items));
                }
                _ => return self.err("expected `,` or `]`"),
            }
        }
    }
}
