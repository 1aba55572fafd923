#![no_main]

use delay_lqr::output::CertificateFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cert) = CertificateFile::parse(text) {
        // A certificate that passes its self-check yields a usable gain.
        let k = cert.gain();
        assert_eq!(k.cols(), cert.certified.phat.len());
    }
});
