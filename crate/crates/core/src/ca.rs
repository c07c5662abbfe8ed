//! Throwaway certificate authority and per-host credentials.
//!
//! Every endpoint in a benchmark mesh gets a credential issued by one test
//! CA, so all HTTPS traffic between endpoints is verified TLS. Keys are
//! ECDSA P-256. There is no revocation support.

use std::fs;
use std::io::Write;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, ExtendedKeyUsagePurpose, IsCa, Issuer,
    KeyPair, KeyUsagePurpose, SanType,
};
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, UnixTime};
use thiserror::Error;
use time::{Duration as TimeDuration, OffsetDateTime};

pub const CA_CERT_FILE: &str = "ca.crt";
pub const CA_KEY_FILE: &str = "ca.key";

// Credentials become valid slightly in the past to absorb clock skew
// between the host that issues them and the hosts that check them.
const BACKDATE: TimeDuration = TimeDuration::minutes(5);

#[derive(Debug, Error)]
pub enum CaError {
    #[error("invalid subject name {0:?}: {1}")]
    InvalidSubject(String, String),
    #[error("validity must be at least one day, got {0}")]
    InvalidValidity(u32),
    #[error("at least one hostname is required")]
    NoHostnames,
    #[error("invalid hostname {0:?}")]
    InvalidHostname(String),
    #[error("certificate authority {0:?} has expired")]
    ExpiredAuthority(String),
    #[error("malformed PEM: {0}")]
    Pem(String),
    #[error("malformed certificate: {0}")]
    Certificate(String),
    #[error("certificate generation failed: {0}")]
    Generate(#[from] rcgen::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CaError + '_ {
    move |source| CaError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A self-signed CA certificate and its signing key, both PEM.
#[derive(Clone, PartialEq, Eq)]
pub struct CertAuthority {
    pub subject_name: String,
    pub certificate: String,
    pub private_key: String,
    pub validity_days: u32,
}

impl std::fmt::Debug for CertAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CertAuthority")
            .field("subject_name", &self.subject_name)
            .field("validity_days", &self.validity_days)
            .finish_non_exhaustive()
    }
}

/// A leaf certificate for one host, usable as TLS server and client identity.
#[derive(Clone, PartialEq, Eq)]
pub struct HostCredential {
    pub hostnames: Vec<String>,
    pub certificate: String,
    pub private_key: String,
    pub issuer: String,
}

impl std::fmt::Debug for HostCredential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HostCredential")
            .field("hostnames", &self.hostnames)
            .field("issuer", &self.issuer)
            .finish_non_exhaustive()
    }
}

/// Parses `CN=Foo,O=Bar` style text. Text without `=` is taken as a bare
/// common name.
fn parse_subject(subject: &str) -> Result<DistinguishedName, CaError> {
    let invalid = |why: &str| CaError::InvalidSubject(subject.to_string(), why.to_string());
    let trimmed = subject.trim();
    if trimmed.is_empty() {
        return Err(invalid("empty"));
    }
    if trimmed.chars().any(char::is_control) {
        return Err(invalid("control characters are not allowed"));
    }
    let mut dn = DistinguishedName::new();
    if !trimmed.contains('=') {
        dn.push(DnType::CommonName, trimmed);
        return Ok(dn);
    }
    for part in trimmed.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| invalid("expected key=value components"))?;
        let value = value.trim();
        if value.is_empty() {
            return Err(invalid("empty attribute value"));
        }
        let ty = match key.trim().to_ascii_uppercase().as_str() {
            "CN" => DnType::CommonName,
            "O" => DnType::OrganizationName,
            "OU" => DnType::OrganizationalUnitName,
            "C" => DnType::CountryName,
            "ST" => DnType::StateOrProvinceName,
            "L" => DnType::LocalityName,
            other => return Err(invalid(&format!("unsupported attribute {other:?}"))),
        };
        dn.push(ty, value);
    }
    Ok(dn)
}

fn validity_window(days: u32) -> Result<(OffsetDateTime, OffsetDateTime), CaError> {
    if days == 0 {
        return Err(CaError::InvalidValidity(days));
    }
    let now = OffsetDateTime::now_utc();
    Ok((now - BACKDATE, now + TimeDuration::days(i64::from(days))))
}

fn first_cert_der(pem: &str) -> Result<CertificateDer<'static>, CaError> {
    CertificateDer::from_pem_slice(pem.as_bytes()).map_err(|e| CaError::Pem(e.to_string()))
}

/// Creates a new self-signed CA with fresh key material.
pub fn create_authority(subject_name: &str, validity_days: u32) -> Result<CertAuthority, CaError> {
    let dn = parse_subject(subject_name)?;
    let (not_before, not_after) = validity_window(validity_days)?;

    let mut params = CertificateParams::default();
    params.distinguished_name = dn;
    params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    params.key_usages = vec![
        KeyUsagePurpose::KeyCertSign,
        KeyUsagePurpose::CrlSign,
        KeyUsagePurpose::DigitalSignature,
    ];
    params.not_before = not_before;
    params.not_after = not_after;
    params.serial_number = Some(random_serial());

    let key = KeyPair::generate()?;
    let cert = params.self_signed(&key)?;
    Ok(CertAuthority {
        subject_name: subject_name.trim().to_string(),
        certificate: cert.pem(),
        private_key: key.serialize_pem(),
        validity_days,
    })
}

fn random_serial() -> rcgen::SerialNumber {
    let mut bytes = *uuid::Uuid::new_v4().as_bytes();
    // Keep the DER integer positive.
    bytes[0] &= 0x7f;
    rcgen::SerialNumber::from_slice(&bytes)
}

fn san_for(host: &str) -> Result<SanType, CaError> {
    let host = host.trim();
    if host.is_empty() {
        return Err(CaError::InvalidHostname(host.to_string()));
    }
    if let Ok(ip) = host.parse::<IpAddr>() {
        return Ok(SanType::IpAddress(ip));
    }
    let valid = host.split('.').all(|label| {
        !label.is_empty()
            && label.len() <= 63
            && label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '*')
    });
    if !valid {
        return Err(CaError::InvalidHostname(host.to_string()));
    }
    host.to_string()
        .try_into()
        .map(SanType::DnsName)
        .map_err(|_| CaError::InvalidHostname(host.to_string()))
}

/// Issues a host credential whose SAN set is exactly `hostnames`.
pub fn issue_host_credential(
    ca: &CertAuthority,
    hostnames: &[String],
    validity_days: u32,
) -> Result<HostCredential, CaError> {
    if hostnames.is_empty() {
        return Err(CaError::NoHostnames);
    }
    let (not_before, not_after) = validity_window(validity_days)?;
    let ca_info = ca.inspect()?;
    if ca_info.not_after <= OffsetDateTime::now_utc() {
        return Err(CaError::ExpiredAuthority(ca.subject_name.clone()));
    }

    let mut params = CertificateParams::default();
    params.subject_alt_names = hostnames.iter().map(|h| san_for(h)).collect::<Result<_, _>>()?;
    let mut dn = DistinguishedName::new();
    dn.push(DnType::CommonName, hostnames[0].trim());
    params.distinguished_name = dn;
    params.key_usages = vec![
        KeyUsagePurpose::DigitalSignature,
        KeyUsagePurpose::KeyEncipherment,
    ];
    params.extended_key_usages = vec![
        ExtendedKeyUsagePurpose::ServerAuth,
        ExtendedKeyUsagePurpose::ClientAuth,
    ];
    params.use_authority_key_identifier_extension = true;
    params.not_before = not_before;
    params.not_after = not_after.min(ca_info.not_after);
    params.serial_number = Some(random_serial());

    let ca_key = KeyPair::from_pem(&ca.private_key).map_err(|e| CaError::Pem(format!("CA key: {e}")))?;
    let issuer = Issuer::from_ca_cert_pem(&ca.certificate, ca_key)?;
    let key = KeyPair::generate()?;
    let cert = params.signed_by(&key, &issuer)?;

    Ok(HostCredential {
        hostnames: hostnames.iter().map(|h| h.trim().to_string()).collect(),
        certificate: cert.pem(),
        private_key: key.serialize_pem(),
        issuer: ca.subject_name.clone(),
    })
}

/// True iff `cred` is signed by `ca` and both are inside their validity
/// windows now. Unparseable input is an error, not `false`.
pub fn verify_chain(cred: &HostCredential, ca: &CertAuthority) -> Result<bool, CaError> {
    verify_chain_pem(&cred.certificate, &ca.certificate)
}

pub fn verify_chain_pem(cert_pem: &str, ca_pem: &str) -> Result<bool, CaError> {
    verify_chain_at(cert_pem, ca_pem, UnixTime::now())
}

fn verify_chain_at(cert_pem: &str, ca_pem: &str, at: UnixTime) -> Result<bool, CaError> {
    let leaf_der = first_cert_der(cert_pem)?;
    let ca_der = first_cert_der(ca_pem)?;
    let anchor =
        webpki::anchor_from_trusted_cert(&ca_der).map_err(|e| CaError::Certificate(format!("CA: {e}")))?;
    let leaf = webpki::EndEntityCert::try_from(&leaf_der).map_err(|e| CaError::Certificate(e.to_string()))?;
    let algs = [
        webpki::ring::ECDSA_P256_SHA256,
        webpki::ring::ECDSA_P384_SHA384,
        webpki::ring::ED25519,
        webpki::ring::RSA_PKCS1_2048_8192_SHA256,
    ];
    let anchors = [anchor];
    let verified = leaf.verify_for_usage(
        &algs,
        &anchors,
        &[],
        at,
        webpki::KeyUsage::server_auth(),
        None,
        None,
    );
    Ok(verified.is_ok())
}

/// Fields read back out of a certificate.
#[derive(Debug, Clone)]
pub struct CertInfo {
    pub subject: String,
    pub issuer: String,
    pub not_before: OffsetDateTime,
    pub not_after: OffsetDateTime,
    pub is_ca: bool,
    pub dns_names: Vec<String>,
    pub ip_addresses: Vec<IpAddr>,
}

pub fn inspect_pem(pem: &str) -> Result<CertInfo, CaError> {
    use x509_parser::extensions::GeneralName;

    let der = first_cert_der(pem)?;
    let (_, cert) =
        x509_parser::parse_x509_certificate(der.as_ref()).map_err(|e| CaError::Certificate(e.to_string()))?;
    let mut dns_names = Vec::new();
    let mut ip_addresses = Vec::new();
    if let Ok(Some(san)) = cert.subject_alternative_name() {
        for name in &san.value.general_names {
            match name {
                GeneralName::DNSName(n) => dns_names.push((*n).to_string()),
                GeneralName::IPAddress(raw) => match raw.len() {
                    4 => ip_addresses.push(IpAddr::from(<[u8; 4]>::try_from(*raw).unwrap())),
                    16 => ip_addresses.push(IpAddr::from(<[u8; 16]>::try_from(*raw).unwrap())),
                    _ => {}
                },
                _ => {}
            }
        }
    }
    let is_ca = matches!(cert.basic_constraints(), Ok(Some(bc)) if bc.value.ca);
    Ok(CertInfo {
        subject: cert.subject().to_string(),
        issuer: cert.issuer().to_string(),
        not_before: cert.validity().not_before.to_datetime(),
        not_after: cert.validity().not_after.to_datetime(),
        is_ca,
        dns_names,
        ip_addresses,
    })
}

fn write_private(path: &Path, contents: &str) -> Result<(), CaError> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut file = opts.open(path).map_err(io_err(path))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        file.set_permissions(fs::Permissions::from_mode(0o600))
            .map_err(io_err(path))?;
    }
    file.write_all(contents.as_bytes()).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, CaError> {
    fs::read_to_string(path).map_err(io_err(path))
}

impl CertAuthority {
    pub fn inspect(&self) -> Result<CertInfo, CaError> {
        inspect_pem(&self.certificate)
    }

    /// Raw public key bytes of the CA's signing key.
    pub fn public_key(&self) -> Result<Vec<u8>, CaError> {
        let key = KeyPair::from_pem(&self.private_key).map_err(|e| CaError::Pem(e.to_string()))?;
        Ok(key.public_key_raw().to_vec())
    }

    /// Writes `ca.crt` and `ca.key` (mode 0600) into `dir`.
    pub fn export(&self, dir: &Path) -> Result<(), CaError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cert_path = dir.join(CA_CERT_FILE);
        fs::write(&cert_path, &self.certificate).map_err(io_err(&cert_path))?;
        write_private(&dir.join(CA_KEY_FILE), &self.private_key)
    }

    pub fn load(dir: &Path) -> Result<Self, CaError> {
        let certificate = read_text(&dir.join(CA_CERT_FILE))?;
        let private_key = read_text(&dir.join(CA_KEY_FILE))?;
        Self::from_pem(certificate, private_key)
    }

    /// Loads only the CA certificate, for use as a trust root. The result
    /// cannot sign.
    pub fn load_trust(cert_path: &Path) -> Result<Self, CaError> {
        Self::from_pem(read_text(cert_path)?, String::new())
    }

    pub fn from_pem(certificate: String, private_key: String) -> Result<Self, CaError> {
        let info = inspect_pem(&certificate)?;
        let days = (info.not_after - info.not_before).whole_days().max(1);
        Ok(Self {
            subject_name: subject_text(&info.subject),
            certificate,
            private_key,
            validity_days: u32::try_from(days).unwrap_or(u32::MAX),
        })
    }
}

/// A bare `CN=x` subject is reported as `x`, matching how it was created.
fn subject_text(subject: &str) -> String {
    match subject.strip_prefix("CN=") {
        Some(cn) if !cn.contains('=') => cn.to_string(),
        _ => subject.to_string(),
    }
}

impl HostCredential {
    /// File stem used on export: the first hostname.
    pub fn file_stem(&self) -> &str {
        &self.hostnames[0]
    }

    /// Writes `<host>.crt` and `<host>.key` (mode 0600); returns both paths.
    pub fn export(&self, dir: &Path) -> Result<(PathBuf, PathBuf), CaError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cert_path = dir.join(format!("{}.crt", self.file_stem()));
        let key_path = dir.join(format!("{}.key", self.file_stem()));
        fs::write(&cert_path, &self.certificate).map_err(io_err(&cert_path))?;
        write_private(&key_path, &self.private_key)?;
        Ok((cert_path, key_path))
    }

    pub fn load(cert_path: &Path, key_path: &Path) -> Result<Self, CaError> {
        let certificate = read_text(cert_path)?;
        let private_key = read_text(key_path)?;
        let info = inspect_pem(&certificate)?;
        let mut hostnames = info.dns_names.clone();
        hostnames.extend(info.ip_addresses.iter().map(|ip| ip.to_string()));
        if hostnames.is_empty() {
            return Err(CaError::NoHostnames);
        }
        Ok(Self {
            hostnames,
            certificate,
            private_key,
            issuer: subject_text(&info.issuer),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hosts(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn authority_is_self_signed_ca() {
        let ca = create_authority("TPCBench Test CA", 365).unwrap();
        let info = ca.inspect().unwrap();
        assert!(info.is_ca);
        assert_eq!(info.subject, info.issuer);
        let now = OffsetDateTime::now_utc();
        assert!(info.not_before <= now && now < info.not_after);
        // The CA certificate verifies against itself as a trust anchor.
        let der = first_cert_der(&ca.certificate).unwrap();
        assert!(webpki::anchor_from_trusted_cert(&der).is_ok());
    }

    #[test]
    fn zero_validity_rejected() {
        assert!(matches!(
            create_authority("TPCBench Test CA", 0),
            Err(CaError::InvalidValidity(0))
        ));
    }

    #[test]
    fn bad_subjects_rejected() {
        for bad in ["", "   ", "CN=", "XX=foo", "CN=a\u{7}b", "CN=a,junk"] {
            assert!(
                matches!(create_authority(bad, 1), Err(CaError::InvalidSubject(..))),
                "{bad:?}"
            );
        }
        let ca = create_authority("CN=Mesh CA,O=Bench,C=US", 1).unwrap();
        assert!(ca.inspect().unwrap().subject.contains("O=Bench"));
    }

    #[test]
    fn identical_inputs_yield_distinct_keys() {
        let a = create_authority("TPCBench Test CA", 365).unwrap();
        let b = create_authority("TPCBench Test CA", 365).unwrap();
        assert_ne!(a.public_key().unwrap(), b.public_key().unwrap());
    }

    #[test]
    fn issued_credential_carries_sans_and_verifies() {
        let ca = create_authority("TPCBench Test CA", 365).unwrap();
        let cred = issue_host_credential(&ca, &hosts(&["localhost", "127.0.0.1"]), 30).unwrap();
        let info = inspect_pem(&cred.certificate).unwrap();
        assert_eq!(info.dns_names, vec!["localhost"]);
        assert_eq!(info.ip_addresses, vec!["127.0.0.1".parse::<IpAddr>().unwrap()]);
        assert!(!info.is_ca);
        assert_eq!(cred.issuer, "TPCBench Test CA");
        assert!(verify_chain(&cred, &ca).unwrap());
    }

    #[test]
    fn empty_hostnames_rejected() {
        let ca = create_authority("TPCBench Test CA", 365).unwrap();
        assert!(matches!(
            issue_host_credential(&ca, &[], 30),
            Err(CaError::NoHostnames)
        ));
        assert!(matches!(
            issue_host_credential(&ca, &hosts(&["bad host"]), 30),
            Err(CaError::InvalidHostname(_))
        ));
    }

    #[test]
    fn foreign_ca_does_not_verify() {
        let a = create_authority("CA A", 10).unwrap();
        let b = create_authority("CA B", 10).unwrap();
        let cred = issue_host_credential(&a, &hosts(&["node1"]), 5).unwrap();
        assert!(verify_chain(&cred, &a).unwrap());
        assert!(!verify_chain(&cred, &b).unwrap());
    }

    #[test]
    fn same_subject_foreign_ca_does_not_verify() {
        let a = create_authority("Twin CA", 10).unwrap();
        let b = create_authority("Twin CA", 10).unwrap();
        let cred = issue_host_credential(&a, &hosts(&["node1"]), 5).unwrap();
        assert!(!verify_chain(&cred, &b).unwrap());
    }

    #[test]
    fn expired_credential_fails_verification() {
        let ca = create_authority("TPCBench Test CA", 365).unwrap();
        let cred = issue_host_credential(&ca, &hosts(&["localhost"]), 1).unwrap();
        let later = UnixTime::since_unix_epoch(std::time::Duration::from_secs(
            (OffsetDateTime::now_utc() + TimeDuration::days(3)).unix_timestamp() as u64,
        ));
        assert!(!verify_chain_at(&cred.certificate, &ca.certificate, later).unwrap());
    }

    #[test]
    fn garbage_is_a_parse_error() {
        let ca = create_authority("TPCBench Test CA", 365).unwrap();
        let garbage = HostCredential {
            hostnames: hosts(&["x"]),
            certificate: "not a certificate".into(),
            private_key: String::new(),
            issuer: String::new(),
        };
        assert!(verify_chain(&garbage, &ca).is_err());
        let truncated = "-----BEGIN CERTIFICATE-----\nAAAA\n-----END CERTIFICATE-----\n";
        assert!(verify_chain_pem(truncated, &ca.certificate).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ca = create_authority("TPCBench Test CA", 365).unwrap();
        ca.export(dir.path()).unwrap();
        let cred = issue_host_credential(&ca, &hosts(&["localhost", "127.0.0.1"]), 30).unwrap();
        let (crt, key) = cred.export(dir.path()).unwrap();
        assert_eq!(crt.file_name().unwrap(), "localhost.crt");

        let ca2 = CertAuthority::load(dir.path()).unwrap();
        assert_eq!(ca2.certificate, ca.certificate);
        assert_eq!(ca2.private_key, ca.private_key);
        assert_eq!(ca2.subject_name, ca.subject_name);
        let cred2 = HostCredential::load(&crt, &key).unwrap();
        assert_eq!(cred2.certificate, cred.certificate);
        assert_eq!(cred2.hostnames, cred.hostnames);
        assert!(verify_chain(&cred2, &ca2).unwrap());

        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let mode = fs::metadata(dir.path().join(CA_KEY_FILE))
                .unwrap()
                .permissions()
                .mode();
            assert_eq!(mode & 0o777, 0o600);
            let mode = fs::metadata(&key).unwrap().permissions().mode();
            assert_eq!(mode & 0o777, 0o600);
        }

        // A reloaded CA can keep issuing.
        let cred3 = issue_host_credential(&ca2, &hosts(&["node2"]), 3).unwrap();
        assert!(verify_chain(&cred3, &ca).unwrap());
    }
}
