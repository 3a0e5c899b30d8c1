use std::path::PathBuf;

use clap::Args;
use crownlab::enhancer::{mock_segmenter, SegmenterRequest};
use crownlab::raster::read_raster;
use crownlab::{Error, Result};

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Guide band on the same pixel grid as the tiles' host raster.
    #[arg(long)]
    guide: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    #[arg(long, default_value = "127.0.0.1:8765")]
    addr: String,
    /// Exit after this many requests.
    #[arg(long)]
    max_requests: Option<usize>,
}

/// Answer `POST /segment` with the flood-fill mock.
pub fn serve(a: ServeArgs) -> Result<()> {
    let guide = read_raster(&a.guide)?.extract_band(0)?;
    let server = tiny_http::Server::http(&a.addr)
        .map_err(|e| Error::Invalid(format!("cannot listen on {}: {e}", a.addr)))?;
    eprintln!("listening on http://{}", server.server_addr());
    for (i, mut req) in server.incoming_requests().enumerate() {
        let mut body = String::new();
        let reply = if req.url() != "/segment" {
            tiny_http::Response::from_string("not found").with_status_code(404)
        } else if let Err(e) = req.as_reader().read_to_string(&mut body) {
            tiny_http::Response::from_string(e.to_string()).with_status_code(400)
        } else {
            match serde_json::from_str::<SegmenterRequest>(&body) {
                Ok(r) => tiny_http::Response::from_string(
                    serde_json::to_string(&mock_segmenter(&r, &guide, a.threshold)).unwrap(),
                ),
                Err(e) => tiny_http::Response::from_string(e.to_string()).with_status_code(400),
            }
        };
        if let Err(e) = req.respond(reply) {
            log::warn!("responding: {e}");
        }
        if a.max_requests.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    Ok(())
}
