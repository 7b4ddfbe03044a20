use rieszlab_core::kernels::PsiKernel;
use rieszlab_core::FieldIndex;
fn main() {
    let psi = PsiKernel::new(FieldIndex::X0, FieldIndex::X0).unwrap();
    let (y1, y2): (f64, f64) = (0.0, 0.0);
    let d = 1.0 + y1 * y1 + y2 * y2;
    let am = psi.alpha.to_f64() * y1.powi(psi.alpha_exps[1] as i32) * y2.powi(psi.alpha_exps[2] as i32);
    let bn = psi.beta.to_f64() * y1.powi(psi.beta_exps[1] as i32) * y2.powi(psi.beta_exps[2] as i32);
    println!("manual: am={am} bn={bn} total={}", am/(d*d) + bn/(d*d*d));
    println!("method: {}", psi.eval(0.0, 0.0));
    println!("alpha_exps={:?} beta_exps={:?}", psi.alpha_exps, psi.beta_exps);
}
