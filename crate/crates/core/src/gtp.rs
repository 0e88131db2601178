//! Go Text Protocol v2 engine session.

use std::io::{self, BufRead, Write};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::goban::{Color, Move, Position, DEFAULT_KOMI, MAX_SIZE, MIN_SIZE};
use crate::search::{puct_search, select_move, Budget, Evaluator, SearchConfig};

pub const ENGINE_NAME: &str = "mobilego";

pub const COMMANDS: [&str; 12] = [
    "protocol_version",
    "name",
    "version",
    "known_command",
    "list_commands",
    "boardsize",
    "clear_board",
    "komi",
    "play",
    "genmove",
    "showboard",
    "quit",
];

/// Column letters, skipping I.
const LETTERS: &[u8; 25] = b"ABCDEFGHJKLMNOPQRSTUVWXYZ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VertexError {
    #[error("invalid coordinate")]
    Syntax,
    #[error("coordinate off board")]
    OffBoard,
}

/// Parses `D4` or `pass`; rows count from the bottom edge.
pub fn parse_vertex(text: &str, size: usize) -> Result<Move, VertexError> {
    let t = text.trim().to_ascii_uppercase();
    if t == "PASS" {
        return Ok(Move::Pass);
    }
    let mut chars = t.chars();
    let letter = chars.next().ok_or(VertexError::Syntax)?;
    let col = LETTERS.iter().position(|&c| c as char == letter).ok_or(VertexError::Syntax)?;
    let number: usize = chars.as_str().parse().map_err(|_| VertexError::Syntax)?;
    if col >= size || number == 0 || number > size {
        return Err(VertexError::OffBoard);
    }
    Ok(Move::at(size - number, col))
}

pub fn format_vertex(m: Move, size: usize) -> String {
    match m {
        Move::Pass => "pass".to_string(),
        Move::Point { row, col } => format!("{}{}", LETTERS[col as usize] as char, size - row as usize),
    }
}

fn parse_color(text: &str) -> Option<Color> {
    match text.to_ascii_lowercase().as_str() {
        "b" | "black" => Some(Color::Black),
        "w" | "white" => Some(Color::White),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    /// Full reply including the `=`/`?` prefix and the terminating blank line.
    pub text: String,
    pub quit: bool,
}

pub struct EngineSession {
    position: Position,
    evaluator: Arc<dyn Evaluator>,
    search: SearchConfig,
    komi: f32,
    randomize: bool,
    rng: ChaCha8Rng,
}

impl EngineSession {
    /// One-second searches and deterministic move choice unless changed.
    pub fn new(evaluator: Arc<dyn Evaluator>, size: usize) -> Result<EngineSession, VertexError> {
        let position = Position::new(size).map_err(|_| VertexError::OffBoard)?;
        Ok(EngineSession {
            position,
            evaluator,
            search: SearchConfig {
                budget: Budget::Time(Duration::from_secs(1)),
                ..SearchConfig::default()
            },
            komi: DEFAULT_KOMI,
            randomize: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn with_budget(mut self, budget: Budget) -> EngineSession {
        self.search.budget = budget;
        self
    }

    pub fn with_randomize(mut self, randomize: bool, seed: u64) -> EngineSession {
        self.randomize = randomize;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn position(&self) -> &Position {
        &self.position
    }

    pub fn komi(&self) -> f32 {
        self.komi
    }

    /// Handles one command line; `None` for blank and comment lines.
    pub fn handle(&mut self, line: &str) -> Option<Response> {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        let mut words: Vec<&str> = line.split_whitespace().collect();
        let id = match words[0].parse::<u64>() {
            Ok(n) => {
                words.remove(0);
                n.to_string()
            }
            Err(_) => String::new(),
        };
        let (command, args) = match words.split_first() {
            Some((c, a)) => (*c, a),
            None => return None,
        };
        let quit = command == "quit";
        let reply = self.execute(command, args);
        let text = match reply {
            Ok(body) => format!("={} {}\n\n", id, body),
            Err(msg) => format!("?{} {}\n\n", id, msg),
        };
        Some(Response { text, quit })
    }

    fn execute(&mut self, command: &str, args: &[&str]) -> Result<String, String> {
        let size = self.position.size();
        match command {
            "protocol_version" => Ok("2".into()),
            "name" => Ok(ENGINE_NAME.into()),
            "version" => Ok(env!("CARGO_PKG_VERSION").into()),
            "known_command" => Ok(args.first().is_some_and(|c| COMMANDS.contains(c)).to_string()),
            "list_commands" => Ok(COMMANDS.join("\n")),
            "quit" => Ok(String::new()),
            "boardsize" => {
                let n: usize = args.first().and_then(|a| a.parse().ok()).ok_or("boardsize not an integer")?;
                if !(MIN_SIZE..=MAX_SIZE).contains(&n) || !self.evaluator.supports_size(n) {
                    return Err("unacceptable size".into());
                }
                self.position = Position::new(n).expect("size checked");
                Ok(String::new())
            }
            "clear_board" => {
                self.position = Position::new(size).expect("current size is valid");
                Ok(String::new())
            }
            "komi" => {
                let k: f32 = args
                    .first()
                    .and_then(|a| a.parse().ok())
                    .filter(|k: &f32| k.is_finite())
                    .ok_or("komi not a float")?;
                self.komi = k;
                Ok(String::new())
            }
            "play" => {
                let (color, vertex) = match args {
                    [c, v, ..] => (parse_color(c).ok_or("invalid color")?, parse_vertex(v, size).map_err(|_| "invalid coordinate")?),
                    _ => return Err("syntax error".into()),
                };
                self.position = self.position.play_as(color, vertex).map_err(|_| "illegal move")?;
                Ok(String::new())
            }
            "genmove" => {
                let color = args.first().and_then(|c| parse_color(c)).ok_or("invalid color")?;
                let pos = self.position.with_to_move(color);
                if pos.is_over() {
                    return Ok("pass".into());
                }
                let cfg = SearchConfig {
                    komi: self.komi,
                    ..self.search
                };
                let result = puct_search(&pos, &*self.evaluator, &cfg).map_err(|e| format!("engine error: {}", e))?;
                let mv = select_move(&result, self.randomize, &mut self.rng);
                self.position = pos.play(mv).expect("search returns legal moves");
                Ok(format_vertex(mv, size))
            }
            "showboard" => Ok(self.render()),
            _ => Err("unknown command".into()),
        }
    }

    fn render(&self) -> String {
        let n = self.position.size();
        let mut s = String::from("\n  ");
        for &l in &LETTERS[..n] {
            s.push(' ');
            s.push(l as char);
        }
        for r in 0..n {
            s.push_str(&format!("\n{:2}", n - r));
            for c in 0..n {
                s.push(' ');
                s.push(match self.position.board().get(r * n + c) {
                    Some(Color::Black) => 'X',
                    Some(Color::White) => 'O',
                    None => '.',
                });
            }
        }
        s
    }
}

/// Reads commands until `quit` or end of input, flushing after each reply.
pub fn serve<R: BufRead, W: Write>(session: &mut EngineSession, input: R, mut output: W) -> io::Result<()> {
    for line in input.lines() {
        if let Some(resp) = session.handle(&line?) {
            output.write_all(resp.text.as_bytes())?;
            output.flush()?;
            if resp.quit {
                break;
            }
        }
    }
    Ok(())
}
