use crate::error::Result;

use super::CascadeSpec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMacs {
    pub component: usize,
    /// `"trunk"` or `"classifier"`.
    pub part: &'static str,
    pub index: usize,
    pub layer: &'static str,
    pub macs: u64,
}

/// Analytic multiply-accumulate counts of a cascade. Convolutions and fully
/// connected layers count; activations, pooling, batch norm and residual
/// additions do not.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacTable {
    pub trunk: Vec<u64>,
    pub classifier: Vec<u64>,
    pub layers: Vec<LayerMacs>,
    cumulative: Vec<u64>,
}

impl MacTable {
    pub fn new(spec: &CascadeSpec) -> Result<MacTable> {
        spec.validate()?;
        let mut shape = spec.input_shape.to_vec();
        let mut layers = Vec::new();
        let (mut trunk, mut classifier) = (Vec::new(), Vec::new());
        for (m, comp) in spec.components.iter().enumerate() {
            let mut t = 0;
            for (i, l) in comp.trunk.iter().enumerate() {
                let macs = l.macs(&shape)?;
                layers.push(LayerMacs {
                    component: m,
                    part: "trunk",
                    index: i,
                    layer: l.name(),
                    macs,
                });
                t += macs;
                shape = l.output_shape(&shape)?;
            }
            let mut c = 0;
            let mut head = shape.clone();
            for (i, l) in comp.classifier.iter().enumerate() {
                let macs = l.macs(&head)?;
                layers.push(LayerMacs {
                    component: m,
                    part: "classifier",
                    index: i,
                    layer: l.name(),
                    macs,
                });
                c += macs;
                head = l.output_shape(&head)?;
            }
            trunk.push(t);
            classifier.push(c);
        }
        let cumulative = trunk
            .iter()
            .zip(&classifier)
            .scan(0u64, |acc, (t, c)| {
                *acc += t + c;
                Some(*acc)
            })
            .collect();
        Ok(MacTable {
            trunk,
            classifier,
            layers,
            cumulative,
        })
    }

    /// Cost of running components `0..=m` including their classifiers.
    pub fn cumulative(&self, m: usize) -> u64 {
        self.cumulative[m]
    }

    pub fn full_network(&self) -> u64 {
        *self.cumulative.last().expect("validated spec has a component")
    }

    pub fn num_components(&self) -> usize {
        self.trunk.len()
    }
}
