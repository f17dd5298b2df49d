use rand::Rng;

use super::ModelError;
use crate::features::{FieldSchema, Group, Instance};
use crate::tensor::{adagrad_update_rows, ParamBlock, Real, TensorError};

/// A row-addressed parameter table that remembers which rows received
/// gradient since the last update, so Adagrad only visits those rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTable<T: Real = f32> {
    pub table: ParamBlock<T>,
    touched: Vec<usize>,
    marked: Vec<bool>,
}

/// The `N x K` embedding matrix read and written by every subnet.
pub type SharedEmbedding<T = f32> = SparseTable<T>;

impl<T: Real> SparseTable<T> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self::from_block(ParamBlock::zeros(rows, dim))
    }

    pub fn from_block(table: ParamBlock<T>) -> Self {
        let rows = table.value.rows();
        Self {
            table,
            touched: Vec::new(),
            marked: vec![false; rows],
        }
    }

    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        self.table.init_uniform(rng, scale);
    }

    pub fn rows(&self) -> usize {
        self.table.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.value.cols()
    }

    pub fn row(&self, index: usize) -> &[T] {
        self.table.value.row(index)
    }

    pub fn add_row_grad(&mut self, index: usize, grad: &[T]) {
        if !self.marked[index] {
            self.marked[index] = true;
            self.touched.push(index);
        }
        for (g, &d) in self.table.grad.row_mut(index).iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn touched_rows(&self) -> &[usize] {
        &self.touched
    }

    /// Adagrad over the touched rows, then forgets them.
    pub fn adagrad(&mut self, lr: f64, eps: f64) -> Result<(), TensorError> {
        adagrad_update_rows(&mut self.table, &self.touched, lr, eps)?;
        self.clear_touched();
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for &r in &self.touched {
            self.table.grad.row_mut(r).iter_mut().for_each(|g| *g = T::zero());
        }
        self.clear_touched();
    }

    fn clear_touched(&mut self) {
        for &r in &self.touched {
            self.marked[r] = false;
        }
        self.touched.clear();
    }

    pub fn cast<U: Real>(&self) -> SparseTable<U> {
        SparseTable::from_block(ParamBlock::from_value(self.table.value.cast()))
    }
}

/// Field index lists consumed by a subnet, in schema order.
pub(crate) fn field_plan<'a>(
    schema: &FieldSchema,
    groups: &[Group],
    instance: &'a Instance,
) -> Result<Vec<&'a [usize]>, ModelError> {
    let mut cursor = [0usize; 4];
    let mut plan = Vec::new();
    for g in Group::ALL {
        let expected = schema.field_count(g);
        let got = instance.group(g).len();
        if expected != got {
            return Err(ModelError::InstanceShape {
                group: g.as_str(),
                expected,
                got,
            });
        }
    }
    for spec in schema.fields() {
        let slot = spec.group as usize;
        if groups.contains(&spec.group) {
            plan.push(instance.group(spec.group)[cursor[slot]].as_slice());
        }
        cursor[slot] += 1;
    }
    Ok(plan)
}

/// Sum-pools each field's rows and concatenates the fields.
pub(crate) fn embed_fields<T: Real>(
    table: &SparseTable<T>,
    fields: &[&[usize]],
) -> Result<Vec<T>, ModelError> {
    let k = table.dim();
    let mut out = vec![T::zero(); k * fields.len()];
    for (slot, feats) in out.chunks_mut(k.max(1)).zip(fields) {
        for &idx in feats.iter() {
            if idx >= table.rows() {
                return Err(ModelError::IndexOutOfRange {
                    index: idx,
                    hash_space: table.rows(),
                });
            }
            for (o, &e) in slot.iter_mut().zip(table.row(idx)) {
                *o += e;
            }
        }
    }
    Ok(out)
}

/// Routes the gradient of a pooled, concatenated vector back to its rows.
pub(crate) fn scatter_fields<T: Real, F: AsRef<[usize]>>(
    table: &mut SparseTable<T>,
    fields: &[F],
    grad: &[T],
) {
    let k = table.dim();
    for (slot, feats) in grad.chunks(k.max(1)).zip(fields) {
        for &idx in feats.as_ref() {
            table.add_row_grad(idx, slot);
        }
    }
}

/// The concatenated sum-pooled embedding of the fields in `groups`.
pub fn embed_group<T: Real>(
    instance: &Instance,
    groups: &[Group],
    shared: &SharedEmbedding<T>,
    schema: &FieldSchema,
) -> Result<Vec<T>, ModelError> {
    let plan = field_plan(schema, groups, instance)?;
    embed_fields(shared, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> FieldSchema {
        FieldSchema::parse("uid,user,uni\ntitle,ad,multi\nhour,other,uni\nage,user,uni\n").unwrap()
    }

    fn inst() -> Instance {
        Instance {
            label: 1,
            user_id: "u".into(),
            timestamp: 0,
            user_indices: vec![vec![1], vec![4]],
            query_indices: vec![],
            ad_indices: vec![vec![2, 3, 2]],
            other_indices: vec![vec![0]],
        }
    }

    #[test]
    fn zero_table_gives_zero_vector() {
        let table = SharedEmbedding::<f32>::zeros(8, 3);
        let m = embed_group(&inst(), &Group::ALL, &table, &schema()).unwrap();
        assert_eq!(m, vec![0.0; 12]);
    }

    #[test]
    fn univalent_row_verbatim_and_schema_order() {
        let mut table = SharedEmbedding::<f64>::zeros(8, 2);
        table.init_uniform(&mut ChaCha8Rng::seed_from_u64(1), 1.0);
        let m = embed_group(&inst(), &[Group::User], &table, &schema()).unwrap();
        assert_eq!(&m[0..2], table.row(1));
        assert_eq!(&m[2..4], table.row(4));
        // all groups: uid, title, hour, age in schema order
        let all = embed_group(&inst(), &Group::ALL, &table, &schema()).unwrap();
        assert_eq!(&all[0..2], table.row(1));
        assert_eq!(&all[4..6], table.row(0));
        assert_eq!(&all[6..8], table.row(4));
    }

    #[test]
    fn multivalent_sum_pools_with_repeats() {
        let mut table = SharedEmbedding::<f64>::zeros(8, 3);
        table.init_uniform(&mut ChaCha8Rng::seed_from_u64(2), 1.0);
        let m = embed_group(&inst(), &[Group::Ad], &table, &schema()).unwrap();
        for c in 0..3 {
            let naive = table.row(2)[c] + table.row(3)[c] + table.row(2)[c];
            assert!((m[c] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_field_pools_to_zero() {
        let mut table = SharedEmbedding::<f64>::zeros(8, 2);
        table.init_uniform(&mut ChaCha8Rng::seed_from_u64(3), 1.0);
        let mut i = inst();
        i.ad_indices = vec![vec![]];
        assert_eq!(embed_group(&i, &[Group::Ad], &table, &schema()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn shape_and_range_errors() {
        let table = SharedEmbedding::<f32>::zeros(4, 2);
        let mut i = inst();
        i.user_indices.pop();
        assert!(matches!(
            embed_group(&i, &Group::ALL, &table, &schema()),
            Err(ModelError::InstanceShape { group: "user", .. })
        ));
        assert!(matches!(
            embed_group(&inst(), &Group::ALL, &table, &schema()),
            Err(ModelError::IndexOutOfRange { index: 4, .. })
        ));
    }

    #[test]
    fn touched_rows_and_sparse_adagrad() {
        let mut table = SharedEmbedding::<f32>::zeros(6, 2);
        scatter_fields(&mut table, &[vec![1usize, 3], vec![1]], &[1.0, 1.0, 0.5, 0.5]);
        assert_eq!(table.touched_rows(), &[1, 3]);
        assert_eq!(table.table.grad.row(1), &[1.5, 1.5]);
        table.adagrad(0.1, 1e-8).unwrap();
        assert!(table.touched_rows().is_empty());
        assert!(table.table.grad.values().iter().all(|&g| g == 0.0));
        assert!(table.row(1)[0] < 0.0 && table.row(0)[0] == 0.0);
    }
}
