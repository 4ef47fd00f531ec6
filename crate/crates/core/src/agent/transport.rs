//! How the agent reaches a server.

use std::sync::Arc;
use std::time::Duration;

use crate::server::{HttpReply, PageRequest, ViceroyServer};

use super::AgentError;

pub const USER_AGENT: &str = concat!("viceroy-agent/", env!("CARGO_PKG_VERSION"));

pub trait Transport {
    fn get(&self, url: &str, cookie: Option<&str>) -> Result<HttpReply, AgentError>;
    fn post(&self, url: &str, body: &str) -> Result<HttpReply, AgentError>;
}

impl<T: Transport + ?Sized> Transport for &T {
    fn get(&self, url: &str, cookie: Option<&str>) -> Result<HttpReply, AgentError> {
        (**self).get(url, cookie)
    }

    fn post(&self, url: &str, body: &str) -> Result<HttpReply, AgentError> {
        (**self).post(url, body)
    }
}

/// Plain HTTP/1.1 over TCP, one connection per request.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .user_agent(USER_AGENT)
            .timeout(Duration::from_secs(30))
            .redirect(reqwest::redirect::Policy::none())
            .pool_max_idle_per_host(0)
            .build()
            .map_err(|e| AgentError::Network(e.to_string()))?;
        Ok(HttpTransport { client })
    }

    fn reply(resp: reqwest::blocking::Response) -> Result<HttpReply, AgentError> {
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .filter_map(|(n, v)| Some((n.as_str().to_string(), v.to_str().ok()?.to_string())))
            .collect();
        let body = resp
            .text()
            .map_err(|e| AgentError::Network(e.to_string()))?;
        Ok(HttpReply {
            status,
            headers,
            body,
        })
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str, cookie: Option<&str>) -> Result<HttpReply, AgentError> {
        let mut req = self.client.get(url);
        if let Some(c) = cookie {
            req = req.header(reqwest::header::COOKIE, c);
        }
        Self::reply(req.send().map_err(|e| AgentError::Network(e.to_string()))?)
    }

    fn post(&self, url: &str, body: &str) -> Result<HttpReply, AgentError> {
        let resp = self
            .client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| AgentError::Network(e.to_string()))?;
        Self::reply(resp)
    }
}

/// Calls a [`ViceroyServer`] in the same process, routing on the URL path.
#[derive(Debug, Clone)]
pub struct LocalTransport {
    server: Arc<ViceroyServer>,
}

impl LocalTransport {
    pub fn new(server: Arc<ViceroyServer>) -> Self {
        LocalTransport { server }
    }
}

fn url_path(url: &str) -> Result<String, AgentError> {
    let parsed = url::Url::parse(url).map_err(|e| AgentError::Network(format!("{url}: {e}")))?;
    Ok(parsed.path().to_string())
}

impl Transport for LocalTransport {
    fn get(&self, url: &str, cookie: Option<&str>) -> Result<HttpReply, AgentError> {
        Ok(self.server.handle_page_request(&PageRequest {
            path: url_path(url)?,
            cookie_header: cookie.map(str::to_string),
            user_agent: Some(USER_AGENT.into()),
        }))
    }

    fn post(&self, url: &str, body: &str) -> Result<HttpReply, AgentError> {
        let path = url_path(url)?;
        let cfg = self.server.config();
        if path == cfg.wrapper_endpoint {
            Ok(self.server.handle_wrapper_request(body.as_bytes()))
        } else if path == cfg.vcr_endpoint {
            Ok(self.server.handle_vcr(body.as_bytes()))
        } else {
            Ok(HttpReply {
                status: 405,
                headers: Vec::new(),
                body: String::new(),
            })
        }
    }
}
