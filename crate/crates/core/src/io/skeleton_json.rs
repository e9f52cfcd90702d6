//! JSON skeleton documents.
//!
//! ```json
//! {"joints": [{"id": "hip", "position": [0, 0, 0], "parent": null},
//!             {"id": "knee", "position": [0, -1, 0], "parent": "hip"}]}
//! ```
//!
//! `parent` may be an index, an identifier or null. A document without any
//! `parent` fields may instead list undirected `bones` as index pairs; the
//! tree is then rooted at `root` (index or identifier) when given, otherwise
//! at the highest-degree joint.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::FormatError;
use crate::error::Result;
use crate::math::Vec3;
use crate::scene::{check_parent_links, Skeleton, Violation};
use crate::skeletonize::root_tree;

#[derive(Debug, Serialize, Deserialize)]
struct JointDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SkeletonDoc {
    joints: Vec<JointDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bones: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    root: Option<Value>,
}

fn doc_err(msg: impl Into<String>) -> FormatError {
    FormatError::Document(msg.into())
}

fn resolve(v: &Value, ids: &[Option<String>]) -> std::result::Result<Option<usize>, FormatError> {
    match v {
        Value::Null => Ok(None),
        Value::Number(n) => {
            let i = n.as_u64().ok_or_else(|| doc_err(format!("bad joint index {n}")))? as usize;
            if i >= ids.len() {
                return Err(doc_err(format!("joint index {i} out of range")));
            }
            Ok(Some(i))
        }
        Value::String(s) => ids
            .iter()
            .position(|id| id.as_deref() == Some(s))
            .map(Some)
            .ok_or_else(|| doc_err(format!("unknown joint `{s}`"))),
        other => Err(doc_err(format!("bad joint reference {other}"))),
    }
}

fn label(ids: &[Option<String>], j: usize) -> String {
    ids[j].clone().unwrap_or_else(|| j.to_string())
}

/// Groups joints by the root their parent chain reaches.
fn components_by_root(parents: &[Option<usize>], ids: &[Option<String>]) -> Vec<Vec<String>> {
    let mut roots: Vec<usize> = Vec::new();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for j in 0..parents.len() {
        let mut r = j;
        while let Some(p) = parents[r] {
            r = p;
        }
        let g = match roots.iter().position(|&x| x == r) {
            Some(g) => g,
            None => {
                roots.push(r);
                groups.push(Vec::new());
                roots.len() - 1
            }
        };
        groups[g].push(label(ids, j));
    }
    groups
}

fn components_of_edges(m: usize, edges: &[[usize; 2]], ids: &[Option<String>]) -> Vec<Vec<String>> {
    let mut rep: Vec<usize> = (0..m).collect();
    fn find(rep: &mut [usize], mut x: usize) -> usize {
        while rep[x] != x {
            rep[x] = rep[rep[x]];
            x = rep[x];
        }
        x
    }
    for &[a, b] in edges {
        let (ra, rb) = (find(&mut rep, a), find(&mut rep, b));
        rep[ra.max(rb)] = ra.min(rb);
    }
    let mut keys: Vec<usize> = Vec::new();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for j in 0..m {
        let r = find(&mut rep, j);
        let g = keys.iter().position(|&k| k == r).unwrap_or_else(|| {
            keys.push(r);
            groups.push(Vec::new());
            keys.len() - 1
        });
        groups[g].push(label(ids, j));
    }
    groups
}

fn import_inner(text: &str) -> std::result::Result<(Vec<Vec3>, Vec<Option<usize>>, Vec<Option<String>>), FormatError> {
    let doc: SkeletonDoc = serde_json::from_str(text).map_err(|e| doc_err(e.to_string()))?;
    let m = doc.joints.len();
    if m == 0 {
        return Err(doc_err("no joints"));
    }
    let ids: Vec<Option<String>> = doc.joints.iter().map(|j| j.id.clone()).collect();
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = ids.iter().flatten().find(|id| !seen.insert(id.as_str())) {
        return Err(doc_err(format!("duplicate joint id `{dup}`")));
    }
    let positions: Vec<Vec3> = doc.joints.iter().map(|j| Vec3::from(j.position)).collect();
    let has_parents = doc.joints.iter().any(|j| j.parent.is_some());

    let parents = if has_parents {
        if doc.bones.is_some() {
            return Err(doc_err("give either parent links or a bone list, not both"));
        }
        let parents = doc
            .joints
            .iter()
            .map(|j| resolve(j.parent.as_ref().unwrap_or(&Value::Null), &ids))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        match check_parent_links(&parents) {
            Ok(()) => {}
            Err(Violation::Cycle { nodes }) => {
                return Err(FormatError::Cycle {
                    nodes: nodes.iter().map(|&j| label(&ids, j)).collect(),
                })
            }
            Err(Violation::MultipleRoots { .. }) => {
                return Err(FormatError::Forest {
                    components: components_by_root(&parents, &ids),
                })
            }
            Err(v) => return Err(doc_err(v.to_string())),
        }
        parents
    } else {
        let bones = doc.bones.unwrap_or_default();
        if let Some(&[a, b]) = bones.iter().find(|e| e[0] >= m || e[1] >= m || e[0] == e[1]) {
            return Err(doc_err(format!("bad bone [{a}, {b}]")));
        }
        let comps = components_of_edges(m, &bones, &ids);
        if comps.len() > 1 {
            return Err(FormatError::Forest { components: comps });
        }
        if bones.len() >= m {
            return Err(FormatError::Cycle {
                nodes: find_edge_cycle(m, &bones).iter().map(|&j| label(&ids, j)).collect(),
            });
        }
        let edges: Vec<(usize, usize)> = bones.iter().map(|e| (e[0], e[1])).collect();
        match &doc.root {
            Some(r) => {
                let r = resolve(r, &ids)?.ok_or_else(|| doc_err("root must name a joint"))?;
                orient_from(m, &edges, r)
            }
            None => root_tree(m, &edges),
        }
    };
    Ok((positions, parents, ids))
}

fn orient_from(m: usize, edges: &[(usize, usize)], root: usize) -> Vec<Option<usize>> {
    let mut adj = vec![Vec::new(); m];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parents = vec![None; m];
    let mut seen = vec![false; m];
    seen[root] = true;
    let mut stack = vec![root];
    while let Some(j) = stack.pop() {
        for &k in &adj[j] {
            if !seen[k] {
                seen[k] = true;
                parents[k] = Some(j);
                stack.push(k);
            }
        }
    }
    parents
}

/// Vertices of one cycle in a connected multigraph with at least `m` edges.
fn find_edge_cycle(m: usize, edges: &[[usize; 2]]) -> Vec<usize> {
    let mut rep: Vec<usize> = (0..m).collect();
    let mut tree = Vec::new();
    fn find(rep: &mut [usize], mut x: usize) -> usize {
        while rep[x] != x {
            x = rep[x];
        }
        x
    }
    for &[a, b] in edges {
        let (ra, rb) = (find(&mut rep, a), find(&mut rep, b));
        if ra == rb {
            // Closing edge: cycle is the tree path a..b.
            let parents = orient_from(m, &tree, a);
            let mut path = vec![b];
            let mut cur = b;
            while let Some(p) = parents[cur] {
                path.push(p);
                cur = p;
            }
            path.sort_unstable();
            return path;
        }
        rep[ra] = rb;
        tree.push((a, b));
    }
    Vec::new()
}

/// Parses a JSON skeleton document. Identifiers are kept when every joint
/// has one.
pub fn import_skeleton(text: &str) -> Result<Skeleton> {
    let (positions, parents, ids) = import_inner(text)?;
    let skel = Skeleton::new(positions, parents)?;
    if ids.iter().all(Option::is_some) {
        return skel.with_identifiers(ids.into_iter().map(Option::unwrap).collect());
    }
    Ok(skel)
}

/// Writes the parent-link form accepted by [`import_skeleton`].
pub fn skeleton_to_json(skeleton: &Skeleton) -> String {
    let doc = SkeletonDoc {
        joints: (0..skeleton.len())
            .map(|b| JointDoc {
                id: skeleton.identifiers.as_ref().map(|ids| ids[b].clone()),
                position: skeleton.joints[b].into(),
                parent: Some(skeleton.parents[b].map_or(Value::Null, |p| Value::from(p))),
            })
            .collect(),
        bones: None,
        root: None,
    };
    serde_json::to_string_pretty(&doc).expect("skeleton serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn duplicate_ids_rejected() {
        let text = r#"{"joints":[{"id":"a","position":[0,0,0]},{"id":"a","position":[0,1,0],"parent":0}]}"#;
        assert!(import_skeleton(text).unwrap_err().to_string().contains("duplicate joint id `a`"));
    }

    #[test]
    fn three_joint_chain() {
        let s = import_skeleton(
            r#"{"joints": [
                {"position": [0, 0, 0], "parent": null},
                {"position": [1, 0, 0], "parent": 0},
                {"position": [2, 0, 0], "parent": 1}]}"#,
        )
        .unwrap();
        assert_eq!(s.parents, vec![None, Some(0), Some(1)]);
        assert!(s.identifiers.is_none());
    }

    #[test]
    fn two_node_cycle() {
        let r = import_skeleton(
            r#"{"joints": [
                {"id": "a", "position": [0, 0, 0], "parent": "b"},
                {"id": "b", "position": [1, 0, 0], "parent": "a"}]}"#,
        );
        match r {
            Err(Error::Format(FormatError::Cycle { nodes })) => assert_eq!(nodes, vec!["a", "b"]),
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn identifiers_survive() {
        let s = import_skeleton(
            r#"{"joints": [
                {"id": "spine", "position": [0, 0, 0], "parent": null},
                {"id": "head", "position": [0, 1, 0], "parent": "spine"}]}"#,
        )
        .unwrap();
        assert_eq!(s.identifiers.as_deref(), Some(&["spine".to_string(), "head".to_string()][..]));
        let again = import_skeleton(&skeleton_to_json(&s)).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn forest_lists_components() {
        let r = import_skeleton(
            r#"{"joints": [
                {"id": "a", "position": [0, 0, 0], "parent": null},
                {"id": "b", "position": [1, 0, 0], "parent": "a"},
                {"id": "c", "position": [5, 0, 0], "parent": null}]}"#,
        );
        match r {
            Err(Error::Format(FormatError::Forest { components })) => {
                assert_eq!(components, vec![vec!["a".to_string(), "b".to_string()], vec!["c".to_string()]])
            }
            other => panic!("expected forest, got {other:?}"),
        }
    }

    #[test]
    fn bone_list_is_rerooted() {
        let text = r#"{"joints": [
                {"position": [0, 0, 0]}, {"position": [1, 0, 0]}, {"position": [2, 0, 0]}],
                "bones": [[0, 1], [1, 2]]}"#;
        let s = import_skeleton(text).unwrap();
        assert_eq!(s.parents, vec![Some(1), None, Some(1)]);
        let rooted = text.replace("\"bones\"", "\"root\": 0, \"bones\"");
        assert_eq!(import_skeleton(&rooted).unwrap().parents, vec![None, Some(0), Some(1)]);
    }

    #[test]
    fn bone_list_errors() {
        let forest = r#"{"joints": [{"position": [0,0,0]}, {"position": [1,0,0]}, {"position": [2,0,0]}], "bones": [[0, 1]]}"#;
        assert!(matches!(import_skeleton(forest), Err(Error::Format(FormatError::Forest { .. }))));
        let cyc = r#"{"joints": [{"position": [0,0,0]}, {"position": [1,0,0]}, {"position": [2,0,0]}],
                    "bones": [[0, 1], [1, 2], [2, 0]]}"#;
        match import_skeleton(cyc) {
            Err(Error::Format(FormatError::Cycle { nodes })) => assert_eq!(nodes, vec!["0", "1", "2"]),
            other => panic!("expected cycle, got {other:?}"),
        }
    }
}
