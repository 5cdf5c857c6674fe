//! The Kronecker identities the optimizers rely on, checked numerically on
//! random matrices: `(B⊗A) vec(X) = vec(A X Bᵀ)` without forming `B⊗A`, and
//! the spectrum of `S⊗A` as all products of the factor eigenvalues.
//!
//! ```text
//! cargo run --example kronecker_identities
//! ```

use ekfac::linalg;
use ekfac::oracle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ekfac::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = oracle::random_mat(&mut rng, 4, 4);
    let b = oracle::random_mat(&mut rng, 3, 3);
    let x = oracle::random_mat(&mut rng, 4, 3);

    let fast = linalg::kron_matvec(&b, &a, &linalg::vec(&x))?;
    let via_product = linalg::vec(&a.matmul(&x).matmul_t(&b));
    let dense = oracle::kron(&b, &a).matvec(&linalg::vec(&x));
    let gap = |u: &[f64], v: &[f64]| u.iter().zip(v).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    println!("kron_matvec vs vec(A X Bᵀ): {:.2e}", gap(&fast, &via_product));
    println!("kron_matvec vs dense (B⊗A) vec(X): {:.2e}", gap(&fast, &dense));

    let fa = oracle::random_psd(&mut rng, 4);
    let fs = oracle::random_psd(&mut rng, 3);
    let (ea, es) = (linalg::sym_eig(&fa)?, linalg::sym_eig(&fs)?);
    let mut products: Vec<f64> = es
        .eigvals
        .iter()
        .flat_map(|s| ea.eigvals.iter().map(move |a| a * s))
        .collect();
    products.sort_by(|p, q| q.total_cmp(p));
    let dense_eig = linalg::sym_eig(&oracle::kron(&fs, &fa))?;
    println!("largest eigenvalues of S⊗A: {:.4?}", &dense_eig.eigvals[..4]);
    println!("largest factor products:    {:.4?}", &products[..4]);
    println!("worst eigenvalue gap: {:.2e}", gap(&products, &dense_eig.eigvals));

    let q = oracle::kron(&es.basis, &ea.basis);
    println!("‖QᵀQ − I‖_max for Q = Q_S⊗Q_A: {:.2e}", linalg::orthogonality_error(&q));
    let round_trip = linalg::unvec(&linalg::vec(&x), 4, 3)?;
    println!("vec/unvec round trip exact: {}", round_trip == x);
    Ok(())
}
