//! Page bodies: ordinary origin pages, origin geoblocking pages, and block
//! pages that the shipped signatures recognize.

use rand::seq::SliceRandom;
use rand::Rng;

const WORDS: &[&str] = &[
    "market", "river", "garden", "history", "travel", "science", "weather", "music", "family",
    "library", "festival", "kitchen", "football", "mountain", "harbor", "school", "coffee",
    "museum", "energy", "forest", "report", "policy", "health", "review", "update", "season",
    "island", "village", "program", "window", "bicycle", "theater", "journal", "network",
    "planet", "recipe", "station", "summer", "winter", "camera", "letter", "bridge",
];

pub(crate) fn words<R: Rng>(rng: &mut R, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

pub(crate) fn origin_page<R: Rng>(rng: &mut R, host: &str) -> Vec<u8> {
    let paras: String = (0..rng.gen_range(2..5))
        .map(|_| {
            let n = rng.gen_range(8..20);
            format!("<p>{}</p>", words(rng, n))
        })
        .collect();
    format!(
        "<!DOCTYPE html><html><head><title>{host}</title></head><body><h1>{}</h1>{paras}<a href=\"/about\">about</a></body></html>",
        words(rng, 3)
    )
    .into_bytes()
}

pub(crate) fn geoblock_page(status: u16, host: &str) -> Vec<u8> {
    let reason = if status == 451 {
        "Unavailable For Legal Reasons"
    } else {
        "Forbidden"
    };
    format!(
        "<html><head><title>{status} {reason}</title></head><body><h1>{reason}</h1><p>{host} is not available in your region due to licensing restrictions.</p></body></html>"
    )
    .into_bytes()
}

/// A block page recognized by signature `sig_id`, personalized with the
/// blocked URL as real deployments do.
pub(crate) fn block_page<R: Rng>(rng: &mut R, sig_id: &str, url: &str) -> Vec<u8> {
    let n: u32 = rng.gen_range(1000..9999);
    let body = match sig_id {
        "ir-iframe-10.10.34.x" => format!(
            "<html><head><meta http-equiv=\"Content-Type\" content=\"text/html; charset=windows-1256\"><title>M{}-{}</title></head><body><iframe src=\"http://10.10.34.{}/?type=Invalid Site&policy=MainPolicy\" style=\"width: 100%; height: 100%\" scrolling=\"no\" marginwidth=\"0\" marginheight=\"0\" frameborder=\"0\" vspace=\"0\" hspace=\"0\"></iframe></body></html>",
            n % 9,
            n % 7,
            rng.gen_range(34..=36)
        ),
        "kr-warning-or-kr" => format!(
            "<html><head><title>warning</title><script>location.replace(\"http://warning.or.kr/i{}.html\")</script></head><body><p>The site you requested is illegal or harmful and access has been restricted. Requested address {url}</p></body></html>",
            n % 3
        ),
        "ru-rkn-registry" => format!(
            "<html><head><title>Access restricted</title></head><body><h2>Access to the requested resource is restricted</h2><p>The resource {url} is included in the unified register. Details are available at <a href=\"http://eais.rkn.gov.ru/\">eais.rkn.gov.ru</a>.</p><p>ref {n}</p></body></html>"
        ),
        "tr-tib-koruma" => format!(
            "<html><head><meta charset=\"utf-8\"><title>Erişim engellendi</title></head><body><p>Bu internet sitesi ({url}) hakkında verilen karar kapsamında koruma tedbiri uygulanmaktadır.</p><p>Karar no {n}</p></body></html>"
        ),
        "in-dot-order" => {
            let authority = [
                "the Department of Telecommunications",
                "a court of competent jurisdiction",
            ]
            .choose(rng)
            .expect("non-empty");
            format!(
                "<html><head><title>Blocked</title></head><body><p>Your requested URL has been blocked as per the instructions of {authority}. Please contact your service provider for further details.</p><p>{url}</p></body></html>"
            )
        }
        "sa-blocked-site" => format!(
            "<html><head><title>Blocked Site</title></head><body><p>Sorry, the requested page {url} is not available.</p><p>If you believe the page should not be blocked please contact CITC.</p><p>{n}</p></body></html>"
        ),
        "id-internet-positif" => format!(
            "<html><head><title>Internet Positif</title></head><body><div><img src=\"/logo.png\"><p>Situs {url} diblokir karena mengandung konten negatif.</p><p>internetpositif {n}</p></div></body></html>"
        ),
        "ke-filter-notice" => format!(
            "<html><head><title>Notice</title></head><body><p>Access to this site has been restricted by your network administrator.</p><p>{url} ({n})</p></body></html>"
        ),
        "global-fortiguard" => format!(
            "<html><head><title>Web Page Blocked!</title></head><body><h2>Web Page Blocked!</h2><p>The page you have requested has been blocked, because the URL is banned.</p><p>URL: {url}</p><p>Category: {}</p><p>FortiGuard Web Filtering</p></body></html>",
            words(rng, 1)
        ),
        "global-netsweeper" => format!(
            "<html><head><meta http-equiv=\"refresh\" content=\"0; url=http://filter.isp.test:8080/webadmin/deny/index.php?dpid={}&dpruleid={n}&url={url}\"></head><body></body></html>",
            n % 50
        ),
        "global-websense" => format!(
            "<html><head><title>Access denied</title></head><body><iframe src=\"http://gateway.test:15871/cgi-bin/blockpage.cgi?ws-session={n}{}\" width=\"100%\" height=\"100%\"></iframe></body></html>",
            rng.gen_range(10_000..99_999)
        ),
        other => panic!("no template for signature `{other}`"),
    };
    body.into_bytes()
}

/// Signature ids with a template, country-scoped ones first.
pub(crate) const TEMPLATE_IDS: &[(&str, Option<&str>)] = &[
    ("ir-iframe-10.10.34.x", Some("IR")),
    ("kr-warning-or-kr", Some("KR")),
    ("ru-rkn-registry", Some("RU")),
    ("tr-tib-koruma", Some("TR")),
    ("in-dot-order", Some("IN")),
    ("sa-blocked-site", Some("SA")),
    ("id-internet-positif", Some("ID")),
    ("ke-filter-notice", Some("KE")),
    ("global-fortiguard", None),
    ("global-netsweeper", None),
    ("global-websense", None),
];

/// The signature a censor in `country` would serve: the country's own page
/// when one exists, otherwise a commercial filter chosen by country.
pub(crate) fn signature_for(country: &str) -> &'static str {
    if let Some((id, _)) = TEMPLATE_IDS.iter().find(|(_, cc)| *cc == Some(country)) {
        return id;
    }
    let globals: Vec<&str> = TEMPLATE_IDS
        .iter()
        .filter(|(_, cc)| cc.is_none())
        .map(|(id, _)| *id)
        .collect();
    let idx = country.bytes().map(usize::from).sum::<usize>() % globals.len();
    globals[idx]
}
