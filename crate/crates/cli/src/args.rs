use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "aura",
    version,
    about = "Score agent actions for risk, pick mitigations and keep a reviewable memory",
    override_usage = "aura <resource> <command> [options]",
    subcommand_value_name = "RESOURCE",
    subcommand_help_heading = "Resources"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub resource: Resource,
}

#[derive(Debug, Clone, Default, Args)]
#[command(next_help_heading = "Global options")]
pub struct GlobalOpts {
    /// Include rationales and debug logs
    #[arg(long, global = true)]
    pub verbose: bool,
    /// Allow the evaluator a larger call budget
    #[arg(long, global = true)]
    pub think: bool,
    /// Bypass memory reuse, or overwrite on save
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write the result document to this file
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Answer yes to confirmation prompts
    #[arg(long, global = true)]
    pub yes: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Table,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Resource {
    /// Decompose agents into actions
    Agent {
        #[command(subcommand)]
        cmd: AgentCmd,
    },
    /// Assess, save and manage single actions
    Action {
        #[command(subcommand)]
        cmd: ActionCmd,
    },
    /// Manage mitigation definitions
    Mitigation {
        #[command(subcommand)]
        cmd: MitigationCmd,
    },
    /// Batch assessment and annotated test runs
    File {
        #[command(subcommand)]
        cmd: FileCmd,
    },
    /// Show and change settings
    Config {
        #[command(subcommand)]
        cmd: ConfigCmd,
    },
    /// Inspect and clear stored items
    Memory {
        #[command(subcommand)]
        cmd: MemoryCmd,
    },
    /// Health, version and diagnostics
    System {
        #[command(subcommand)]
        cmd: SystemCmd,
    },
    /// Review sessions opened for uncertain assessments
    Hitl {
        #[command(subcommand)]
        cmd: HitlCmd,
    },
}

#[derive(Debug, Subcommand)]
pub enum AgentCmd {
    /// List the actions an agent can take, without scoring
    Actions {
        #[arg(value_name = "agent_id|@file|@-")]
        agent: String,
    },
    /// Decompose an agent and assess every action
    Assess {
        #[arg(value_name = "agent_id|@file|@-")]
        agent: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ActionCmd {
    /// Score an action and select mitigations
    Assess {
        #[arg(value_name = "action_id|@file|json|@-")]
        action: String,
    },
    /// Assess and plan mitigations; --apply runs them
    Mitigate {
        #[arg(value_name = "action_id|@file|@-")]
        action: String,
        #[arg(long)]
        apply: bool,
    },
    /// Assess and store the result in memory
    Save {
        #[arg(value_name = "action_id|@file|@-")]
        action: String,
    },
    /// Check an action record without assessing or saving it
    Validate {
        #[arg(value_name = "action_id|@file|@-")]
        action: String,
    },
    /// Saved actions with scores and mitigations
    List,
    /// One saved action
    Show { action_id: String },
    /// Edit status, notes, context, ttl or hitl_required
    Update {
        action_id: String,
        #[arg(long = "field", value_name = "k=v", required = true)]
        fields: Vec<String>,
    },
    /// Remove a saved action
    Delete { action_id: String },
    /// Export saved actions as JSON or CSV
    Export,
    /// Attach mitigations to a saved action
    LinkMitigation {
        action_id: String,
        #[arg(required = true)]
        mitigation_ids: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum MitigationCmd {
    /// Register one definition or a list of them
    Save {
        #[arg(value_name = "@file|json|@-")]
        mitigation: String,
    },
    /// Check a definition without saving it
    Validate {
        #[arg(value_name = "@file|json|@-")]
        mitigation: String,
    },
    /// Execute against an action, or every saved action linking it
    Run {
        mitigation_id: String,
        #[arg(long, value_name = "action_id|@file|json|@-")]
        action: Option<String>,
    },
    Show { mitigation_id: String },
    List,
    Delete { mitigation_id: String },
}

#[derive(Debug, Subcommand)]
pub enum FileCmd {
    /// Assess every row of a csv, jsonl or json file
    Assess {
        #[arg(long, value_name = "csv|jsonl|json")]
        input: PathBuf,
    },
    /// Compare assessments with annotated expectations
    Test {
        #[arg(long, value_name = "csv|jsonl")]
        input: PathBuf,
        #[arg(long, value_name = "csv|jsonl")]
        expected: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConfigCmd {
    /// Set a key, e.g. auto_save true or auto_save_threshold 0.95
    Set { key: String, value: String },
    Show,
    /// Restore defaults
    Reset,
}

#[derive(Debug, Subcommand)]
pub enum MemoryCmd {
    /// Clear stored items
    #[command(group(ArgGroup::new("what").required(true).multiple(true).args(["actions", "mitigations", "rules", "all"])))]
    Purge {
        #[arg(long)]
        actions: bool,
        #[arg(long)]
        mitigations: bool,
        /// Stored user preference rules
        #[arg(long)]
        rules: bool,
        #[arg(long)]
        all: bool,
    },
    /// Counts and storage details
    Stats,
    /// Full memory document as JSON
    Export,
    /// Replace memory with an exported document
    Import {
        #[arg(value_name = "@file|json|@-")]
        document: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum SystemCmd {
    Status,
    Version,
    /// Check schemas, memory integrity and configuration
    Doctor,
}

#[derive(Debug, Subcommand)]
pub enum HitlCmd {
    /// Sessions, open ones first
    List,
    Show { session_id: String },
    /// Submit answers and refine the parked assessment
    Answer {
        session_id: String,
        #[arg(value_name = "@file|json|@-")]
        answers: String,
        /// Operator recorded as the human actor
        #[arg(long, default_value = "cli")]
        operator: String,
    },
    /// Close a session without changes
    Abandon {
        session_id: String,
        #[arg(long, default_value = "cli")]
        operator: String,
    },
}
