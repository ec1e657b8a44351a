mod common;

use common::gradcheck;

#[test]
fn dense_gradients() {
    gradcheck::dense().unwrap();
}

#[test]
fn conv_gradients() {
    gradcheck::conv().unwrap();
}

#[test]
fn tiny_autoencoder_gradients() {
    gradcheck::tiny_autoencoder().unwrap();
}

#[test]
fn lstm_gradients() {
    gradcheck::lstm().unwrap();
}
