//! Line-oriented what-if loop: pick a sample, edit its entity context, and
//! regenerate. Captions go to stdout, prompts and messages to stderr.

use std::io::{self, BufRead, Write};

use anyhow::{bail, Result};

use ooc_core::{Checkpoint, DecodeMode, NerDictionary, VisualRecord};

use crate::commands::{caption, find_record, load_model_features};
use crate::ReplArgs;

const HELP: &str = "\
commands:
  id ID             select a feature record
  set TYPE a,b      set the entity strings of one type
  unset TYPE        drop one type
  clear             drop all entities
  show              print the current state
  mode greedy|beam:K
  gen               generate a caption
  help
  quit";

struct Session {
    checkpoint: Checkpoint,
    features: Vec<VisualRecord>,
    id: Option<String>,
    entities: NerDictionary,
    mode: DecodeMode,
}

enum Step {
    Continue,
    Quit,
}

impl Session {
    fn execute(&mut self, line: &str, out: &mut impl Write) -> Result<Step> {
        let line = line.trim();
        let (cmd, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        match cmd {
            "" => {}
            "quit" | "exit" => return Ok(Step::Quit),
            "help" => eprintln!("{HELP}"),
            "id" => {
                find_record(&self.features, rest)?;
                self.id = Some(rest.to_string());
            }
            "set" => {
                let Some((label, values)) = rest.split_once(char::is_whitespace) else {
                    bail!("usage: set TYPE a,b");
                };
                let spec = format!("{label}={}", values.trim());
                let parsed = NerDictionary::parse_spec(&spec, &self.checkpoint.context.labels)?;
                for (label, tokens) in parsed.iter() {
                    self.entities
                        .set(label, tokens.to_vec(), &self.checkpoint.context.labels)
                        .map_err(ooc_core::Error::Input)?;
                }
            }
            "unset" => {
                self.entities.remove(rest);
            }
            "clear" => self.entities = NerDictionary::new(),
            "mode" => self.mode = rest.parse()?,
            "show" => {
                let spec: Vec<String> = self
                    .entities
                    .iter()
                    .map(|(label, tokens)| format!("{label}={}", tokens.join(",")))
                    .collect();
                writeln!(
                    out,
                    "id={} mode={} tokens=\"{}\"",
                    self.id.as_deref().unwrap_or("-"),
                    self.mode,
                    spec.join(";")
                )?;
            }
            "gen" => {
                let Some(id) = &self.id else {
                    bail!("no record selected; use `id ID`");
                };
                let record = find_record(&self.features, id)?;
                writeln!(out, "{}", caption(&self.checkpoint, record, &self.entities, self.mode, None)?)?;
            }
            other => bail!("unknown command `{other}`; try `help`"),
        }
        Ok(Step::Continue)
    }
}

pub fn run(args: ReplArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let features = load_model_features(&checkpoint, &args.features)?;
    let mut session = Session {
        checkpoint,
        features,
        id: None,
        entities: NerDictionary::new(),
        mode: args.mode.parse()?,
    };
    if let Some(id) = &args.id {
        session.execute(&format!("id {id}"), &mut io::sink())?;
    }
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut line = String::new();
    loop {
        eprint!("> ");
        line.clear();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        match session.execute(&line, &mut out) {
            Ok(Step::Quit) => break,
            Ok(Step::Continue) => {}
            Err(e) => eprintln!("error: {e:#}"),
        }
        out.flush()?;
    }
    Ok(())
}
