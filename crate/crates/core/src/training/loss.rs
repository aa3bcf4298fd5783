use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

/// Symmetric InfoNCE over a batch of paired embeddings; pair `i` is row `i`
/// of both inputs. Rows are L2-normalised before the `1/τ`-scaled similarity.
pub fn info_nce<'t, T: Real>(img: &Var<'t, T>, txt: &Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    let b = img.shape()[0];
    if b == 0 {
        return Err(Error::Input("InfoNCE over an empty batch".into()));
    }
    if txt.shape()[0] != b {
        return Err(Error::shape("info_nce", &img.shape(), &txt.shape()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let sim = img
        .l2_normalize_rows()?
        .matmul_t(&txt.l2_normalize_rows()?)?
        .scale(T::lit(1.0 / tau));
    let diag: Vec<Option<usize>> = (0..b).map(Some).collect();
    let i2t = sim.cross_entropy(&diag)?;
    let t2i = sim.transpose()?.cross_entropy(&diag)?;
    Ok(i2t.add(&t2i)?.scale(T::lit(0.5)))
}

pub struct LossParts<'t, T: Real> {
    pub total: Var<'t, T>,
    pub ce: Var<'t, T>,
    pub nce: Var<'t, T>,
}

/// `λ_CE · CE + λ_NCE · InfoNCE`; CE is the mean over every non-PAD target
/// position of the batch (`logits` rows stacked across samples).
pub fn loss_total<'t, T: Real>(
    logits: &Var<'t, T>,
    targets: &[Option<usize>],
    h_img: &Var<'t, T>,
    h_txt: &Var<'t, T>,
    lambda_ce: f64,
    lambda_nce: f64,
    tau: f64,
) -> Result<LossParts<'t, T>> {
    if h_img.shape()[0] == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let ce = logits.cross_entropy(targets)?;
    let nce = info_nce(h_img, h_txt, tau)?;
    let total = ce.scale(T::lit(lambda_ce)).add(&nce.scale(T::lit(lambda_nce)))?;
    Ok(LossParts { total, ce, nce })
}
