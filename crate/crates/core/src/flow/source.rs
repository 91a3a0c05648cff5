//! Tabular inputs that are not NGSI-LD: CSV parsing and plain-row datasets.

use serde_json::{Map, Value};

use super::FlowError;
use crate::odp::{NewDataset, NewResource, PortalApi, PortalError};

/// Parses CSV with a header line into rows of raw string fields.
pub fn csv_rows(text: &str) -> Result<Vec<Map<String, Value>>, FlowError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| FlowError::UnmappableRecord(format!("csv header: {e}")))?
        .clone();
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| FlowError::UnmappableRecord(format!("csv: {e}")))?;
            Ok(headers
                .iter()
                .zip(r.iter())
                .filter(|(_, v)| !v.is_empty())
                .map(|(h, v)| (h.to_string(), Value::String(v.to_string())))
                .collect())
        })
        .collect()
}

/// Publishes rows as-is under a new dataset with a single `data` resource.
/// Returns the number of rows stored.
pub async fn publish_rows(
    portal: &dyn PortalApi,
    organization: &str,
    dataset: &str,
    title: &str,
    rows: &[Map<String, Value>],
) -> Result<usize, FlowError> {
    match portal.organization_create(organization, organization).await {
        Ok(_) | Err(PortalError::Conflict(_)) => {}
        Err(e) => return Err(e.into()),
    }
    portal
        .package_create(&NewDataset {
            name: dataset.to_string(),
            title: title.to_string(),
            owner_org: organization.to_string(),
            metadata: None,
        })
        .await?;
    let res = portal.resource_create(dataset, &NewResource::rows("data")).await?;
    let mut n = 0;
    for row in rows {
        n = portal
            .resource_append(dataset, &res.id, &Value::Object(row.clone()))
            .await?;
    }
    Ok(n)
}
