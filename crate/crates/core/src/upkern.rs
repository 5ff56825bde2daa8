//! Kernel-upsampling weight transfer: initialize a large-kernel model from a
//! trained small-kernel one by trilinearly resampling the spatial part of
//! every mismatched convolution kernel and copying everything else verbatim.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::MedNeXtModel;
use crate::tensor::{no_grad, trilinear_resize, Tensor};

/// Outcome of a weight transfer, listing every tensor by how it moved.
#[derive(Clone, Debug, Default)]
pub struct TransferReport {
    /// Names whose tensors were copied bit for bit.
    pub copied: Vec<String>,
    /// Names whose spatial kernel extents were resampled.
    pub resampled: Vec<String>,
}

impl TransferReport {
    pub fn total(&self) -> usize {
        self.copied.len() + self.resampled.len()
    }

    /// One-line summary, e.g. `42 tensors copied, 6 tensors resampled`.
    pub fn summary(&self) -> String {
        format!(
            "{} tensors copied, {} tensors resampled",
            self.copied.len(),
            self.resampled.len()
        )
    }
}

/// Resize the spatial axes of a 5-axis convolution kernel to
/// `target_spatial` by trilinear interpolation with corner alignment, so
/// kernel corners map onto kernel corners and equal extents copy exactly.
/// Channel axes are untouched. The kernel's total mass is not renormalized,
/// so its L1 norm changes with the extent.
pub fn resample_kernel(weight: &Tensor, target_spatial: [usize; 3]) -> Result<Tensor> {
    if weight.shape().len() != 5 {
        return Err(Error::Usage(format!(
            "kernel resampling expects a 5-axis convolution weight, got shape {:?}",
            weight.shape()
        )));
    }
    for &e in &target_spatial {
        if e % 2 == 0 {
            return Err(Error::Usage(format!(
                "target kernel extents must be odd, got {target_spatial:?}"
            )));
        }
    }
    trilinear_resize(weight, target_spatial, true)
}

/// Initialize `target` from the named tensors of a source model with the
/// same configuration apart from kernel size. Tensors with identical shapes
/// are copied verbatim (normalization parameters included); convolution
/// kernels that differ only in their spatial extents are resampled with
/// [`resample_kernel`]. Every target parameter is overwritten.
pub fn upkern_transfer(
    source: &[(String, Tensor)],
    target: &MedNeXtModel,
) -> Result<TransferReport> {
    let mut source_map: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for (name, tensor) in source {
        if source_map.insert(name.as_str(), tensor).is_some() {
            return Err(Error::Compatibility(format!(
                "source has duplicate tensor name {name:?}"
            )));
        }
    }

    let target_params = target.named_parameters();
    for (name, _) in &target_params {
        if !source_map.contains_key(name.as_str()) {
            return Err(Error::Compatibility(format!(
                "tensor {name:?} exists in the target model but not in the source"
            )));
        }
    }
    if source_map.len() != target_params.len() {
        let target_names: std::collections::BTreeSet<&str> =
            target_params.iter().map(|(n, _)| n.as_str()).collect();
        let extra: Vec<&str> = source_map
            .keys()
            .copied()
            .filter(|n| !target_names.contains(n))
            .collect();
        return Err(Error::Compatibility(format!(
            "source tensors {extra:?} have no counterpart in the target model"
        )));
    }

    let mut report = TransferReport::default();
    no_grad(|| -> Result<()> {
        for (name, dst) in &target_params {
            let src = source_map[name.as_str()];
            if src.shape() == dst.shape() {
                dst.copy_from(src)?;
                report.copied.push(name.clone());
            } else if kernel_resample_compatible(src.shape(), dst.shape()) {
                let spatial = [dst.shape()[2], dst.shape()[3], dst.shape()[4]];
                let resized = resample_kernel(src, spatial)?;
                dst.copy_from(&resized)?;
                report.resampled.push(name.clone());
            } else {
                return Err(Error::Compatibility(format!(
                    "tensor {name:?} has source shape {:?} and target shape {:?}, \
                     which differ outside the spatial kernel axes",
                    src.shape(),
                    dst.shape()
                )));
            }
        }
        Ok(())
    })?;
    Ok(report)
}

/// Shapes qualify for kernel resampling when both are 5-axis, the channel
/// axes agree, and only the spatial extents differ.
fn kernel_resample_compatible(src: &[usize], dst: &[usize]) -> bool {
    src.len() == 5 && dst.len() == 5 && src[..2] == dst[..2]
}
