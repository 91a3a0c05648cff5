//! DCAT RDF/XML rendering of a dataset record.

use std::fmt::Write;

use super::DatasetView;

pub const RDF_NS: &str = "http://www.w3.org/1999/02/22-rdf-syntax-ns#";
pub const DCAT_NS: &str = "http://www.w3.org/ns/dcat#";
pub const DCT_NS: &str = "http://purl.org/dc/terms/";
const XSD_DATETIME: &str = "http://www.w3.org/2001/XMLSchema#dateTime";

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// One `dcat:Dataset` with a `dcat:Distribution` per resource. Row contents
/// never appear, so appending rows only moves `dct:modified`.
pub fn render(d: &DatasetView, portal_base: &str) -> String {
    let m = &d.metadata;
    let mut x = String::new();
    x.push_str("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n");
    x.push_str("<rdf:RDF\n");
    let _ = writeln!(x, " xmlns:rdf=\"{RDF_NS}\"");
    let _ = writeln!(x, " xmlns:dcat=\"{DCAT_NS}\"");
    let _ = writeln!(x, " xmlns:dct=\"{DCT_NS}\">");
    let about = format!("{}/dataset/{}", portal_base.trim_end_matches('/'), d.name);
    let _ = writeln!(x, " <dcat:Dataset rdf:about=\"{}\">", escape(&about));
    let _ = writeln!(x, "  <dct:identifier>{}</dct:identifier>", escape(&d.name));
    let _ = writeln!(x, "  <dct:title>{}</dct:title>", escape(&d.title));
    if !m.description.is_empty() {
        let _ = writeln!(x, "  <dct:description>{}</dct:description>", escape(&m.description));
    }
    let _ = writeln!(
        x,
        "  <dct:issued rdf:datatype=\"{XSD_DATETIME}\">{}</dct:issued>",
        m.issued
    );
    let _ = writeln!(
        x,
        "  <dct:modified rdf:datatype=\"{XSD_DATETIME}\">{}</dct:modified>",
        m.modified
    );
    for k in &m.keywords {
        let _ = writeln!(x, "  <dcat:keyword>{}</dcat:keyword>", escape(k));
    }
    for r in &d.resources {
        x.push_str("  <dcat:distribution>\n");
        x.push_str("   <dcat:Distribution>\n");
        let _ = writeln!(x, "    <dct:title>{}</dct:title>", escape(&r.name));
        let _ = writeln!(x, "    <dcat:accessURL rdf:resource=\"{}\"/>", escape(&r.url));
        let _ = writeln!(x, "    <dct:format>{}</dct:format>", escape(&r.format));
        x.push_str("   </dcat:Distribution>\n");
        x.push_str("  </dcat:distribution>\n");
    }
    x.push_str(" </dcat:Dataset>\n");
    x.push_str("</rdf:RDF>\n");
    x
}

/// Summary of a parsed export, used to check structural validity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DcatSummary {
    pub dataset_title: String,
    pub distribution_titles: Vec<String>,
    pub modified: String,
}

/// Parses an export with a real XML parser and pulls out the titles.
pub fn inspect(xml: &str) -> Result<DcatSummary, String> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| e.to_string())?;
    let root = doc.root_element();
    if !root.has_tag_name((RDF_NS, "RDF")) {
        return Err("root element is not rdf:RDF".into());
    }
    for (prefix, ns) in [("rdf", RDF_NS), ("dcat", DCAT_NS), ("dct", DCT_NS)] {
        if root.lookup_namespace_uri(Some(prefix)) != Some(ns) {
            return Err(format!("namespace {prefix} not declared as {ns}"));
        }
    }
    let datasets: Vec<_> = root
        .children()
        .filter(|n| n.has_tag_name((DCAT_NS, "Dataset")))
        .collect();
    let [dataset] = datasets[..] else {
        return Err(format!("expected one dcat:Dataset, found {}", datasets.len()));
    };
    let child_text = |n: roxmltree::Node, ns: &str, name: &str| {
        n.children()
            .find(|c| c.has_tag_name((ns, name)))
            .and_then(|c| c.text())
            .map(|t| t.trim().to_string())
    };
    let dataset_title = child_text(dataset, DCT_NS, "title").ok_or("dataset has no dct:title")?;
    let modified = child_text(dataset, DCT_NS, "modified").unwrap_or_default();
    let distribution_titles = dataset
        .children()
        .filter(|n| n.has_tag_name((DCAT_NS, "distribution")))
        .flat_map(|n| n.children().filter(|c| c.has_tag_name((DCAT_NS, "Distribution"))))
        .map(|dist| child_text(dist, DCT_NS, "title").unwrap_or_default())
        .collect();
    Ok(DcatSummary {
        dataset_title,
        distribution_titles,
        modified,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{CatalogMetadata, ResourceView};
    use super::*;
    use crate::time::Timestamp;

    fn view(resources: Vec<ResourceView>) -> DatasetView {
        let t = Timestamp::from_millis(1_700_000_000_000);
        DatasetView {
            name: "urn:ngsi-ld:OffStreetParking:1".into(),
            title: "Parking 1".into(),
            owner_org: "offstreetparking".into(),
            metadata: CatalogMetadata {
                keywords: vec!["OffStreetParking".into(), "digital-twin".into()],
                description: "A & B <c>".into(),
                ..CatalogMetadata::minimal("Parking 1", t)
            },
            resources,
        }
    }

    #[test]
    fn namespaces_and_titles() {
        let r = ResourceView {
            id: "res-000001".into(),
            name: "Occupancy level of Parking 1".into(),
            format: "JSONL".into(),
            url: "http://portal/datasets/x/resources/res-000001/rows".into(),
            metadata_only: false,
            row_count: 3,
        };
        let xml = render(&view(vec![r]), "http://portal");
        assert!(xml.contains(r#"xmlns:rdf="http://www.w3.org/1999/02/22-rdf-syntax-ns#""#));
        assert!(xml.contains(r#"xmlns:dcat="http://www.w3.org/ns/dcat#""#));
        assert!(xml.contains(r#"xmlns:dct="http://purl.org/dc/terms/""#));
        assert!(xml.contains("<dct:title>Parking 1</dct:title>"));
        assert!(xml.contains("<dct:title>Occupancy level of Parking 1</dct:title>"));
        let s = inspect(&xml).unwrap();
        assert_eq!(s.dataset_title, "Parking 1");
        assert_eq!(s.distribution_titles, ["Occupancy level of Parking 1"]);
    }

    #[test]
    fn zero_resources_is_still_valid() {
        let xml = render(&view(vec![]), "http://portal");
        assert!(inspect(&xml).unwrap().distribution_titles.is_empty());
        assert!(!xml.contains("Distribution"));
    }

    #[test]
    fn escapes_markup() {
        let xml = render(&view(vec![]), "http://portal");
        assert!(xml.contains("A &amp; B &lt;c&gt;"));
    }
}
