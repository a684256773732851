use super::{ChatMessage, LlmClient, LlmError};
use crate::prompting::ParseError;

/// A parsed answer plus what it took to get it.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer<T> {
    pub value: Result<T, ParseError>,
    /// Raw text of the last response.
    pub raw: String,
    pub repairs: usize,
}

/// Growing multi-turn dialogue. The whole history is resent each turn.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conversation {
    messages: Vec<ChatMessage>,
}

impl Conversation {
    pub fn new(system: impl Into<String>) -> Self {
        Self { messages: vec![ChatMessage::system(system)] }
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn into_messages(self) -> Vec<ChatMessage> {
        self.messages
    }

    fn exchange(&mut self, client: &LlmClient, tag: &str, text: String) -> Result<String, LlmError> {
        self.messages.push(ChatMessage::user(text));
        let request = client.request(self.messages.clone(), tag);
        match client.complete(&request) {
            Ok(answer) => {
                self.messages.push(ChatMessage::assistant(answer.clone()));
                Ok(answer)
            }
            Err(e) => {
                self.messages.pop();
                Err(e)
            }
        }
    }

    /// Sends `text`, parses the answer, and on a parse failure re-asks with
    /// `repair` up to `retries` times. Transport failures abort.
    pub fn ask<T>(
        &mut self,
        client: &LlmClient,
        tag: &str,
        text: String,
        repair: &str,
        retries: usize,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<Answer<T>, LlmError> {
        let mut raw = self.exchange(client, tag, text)?;
        let mut value = parse(&raw);
        let mut repairs = 0;
        while value.is_err() && repairs < retries {
            repairs += 1;
            raw = self.exchange(client, &format!("{tag}:repair"), repair.to_string())?;
            value = parse(&raw);
        }
        Ok(Answer { value, raw, repairs })
    }
}
